#include "vesselseg/unet.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vesselseg/rng.hpp"

namespace vesselseg {

using nlohmann::json;

UNetConfig UNetConfig::paper() { return UNetConfig{}; }

UNetConfig UNetConfig::desk() {
  UNetConfig c;
  c.num_downsamples = 3;
  c.base_channels = 8;
  c.channel_cap = 64;
  c.deep_supervision_heads = 3;
  return c;
}

void UNetConfig::validate() const {
  if (num_downsamples < 1) throw ParameterError("num_downsamples must be >= 1");
  if (base_channels < 1 || channel_cap < 1) throw ParameterError("channel counts must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ParameterError("kernel must be odd");
  if (convs_per_stage < 1) throw ParameterError("convs_per_stage must be >= 1");
  if (deep_supervision_heads < 1 || deep_supervision_heads > num_downsamples)
    throw ParameterError("deep_supervision_heads must lie in [1, num_downsamples]");
  if (in_channels < 1 || out_channels < 1) throw ParameterError("in/out channels must be positive");
  if (!(norm_eps > 0)) throw ParameterError("norm_eps must be positive");
}

int UNetConfig::channels(int stage) const {
  const long long c = static_cast<long long>(base_channels) << stage;
  return static_cast<int>(std::min<long long>(c, channel_cap));
}

void to_json(json& j, const UNetConfig& c) {
  j = json{{"num_downsamples", c.num_downsamples}, {"base_channels", c.base_channels},
           {"channel_cap", c.channel_cap},         {"kernel", c.kernel},
           {"convs_per_stage", c.convs_per_stage}, {"leaky_slope", c.leaky_slope},
           {"deep_supervision_heads", c.deep_supervision_heads},
           {"in_channels", c.in_channels},         {"out_channels", c.out_channels},
           {"norm_eps", c.norm_eps}};
}

void from_json(const json& j, UNetConfig& c) {
  c.num_downsamples = j.value("num_downsamples", c.num_downsamples);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_cap = j.value("channel_cap", c.channel_cap);
  c.kernel = j.value("kernel", c.kernel);
  c.convs_per_stage = j.value("convs_per_stage", c.convs_per_stage);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.deep_supervision_heads = j.value("deep_supervision_heads", c.deep_supervision_heads);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
}

Index parameter_count(const UNetConfig& cfg) {
  cfg.validate();
  const Index k3 = static_cast<Index>(cfg.kernel) * cfg.kernel * cfg.kernel;
  auto unit = [&](Index cin, Index cout) { return cout * cin * k3 + cout + 2 * cout; };
  Index total = 0;
  for (int s = 0; s <= cfg.num_downsamples; ++s) {
    const Index cin0 = s == 0 ? cfg.in_channels : cfg.channels(s - 1);
    const Index c = cfg.channels(s);
    for (int u = 0; u < cfg.convs_per_stage; ++u) total += unit(u == 0 ? cin0 : c, c);
  }
  for (int s = cfg.num_downsamples - 1; s >= 0; --s) {
    const Index c = cfg.channels(s), below = cfg.channels(s + 1);
    total += below * c * 8;  // transposed conv, no bias
    for (int u = 0; u < cfg.convs_per_stage; ++u) total += unit(u == 0 ? 2 * c : c, c);
    if (s < cfg.deep_supervision_heads) total += c * cfg.out_channels + cfg.out_channels;
  }
  return total;
}

template <typename S>
std::vector<Tensor<S>> UNetOutputs<S>::heads() const {
  std::vector<Tensor<S>> h{main};
  h.insert(h.end(), aux.begin(), aux.end());
  return h;
}

template <typename S>
UNet<S>::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, "unet.init");
  const int k = cfg_.kernel;
  auto he_normal = [&](const Shape& shape, Index fan_in) {
    Tensor<S> t(shape, true);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < t.numel(); ++i) t.value()[i] = static_cast<S>(std * normal01(rng));
    return t;
  };
  auto make_unit = [&](const std::string& name, Index cin, Index cout, int stride) {
    ConvUnit u;
    u.weight = he_normal(Shape(cout, cin, k, k, k), cin * k * k * k);
    u.bias = Tensor<S>(Shape(1, cout, 1, 1, 1), true);
    u.gamma = Tensor<S>(Shape(1, cout, 1, 1, 1), Tensor<S>::Array::Ones(cout), true);
    u.beta = Tensor<S>(Shape(1, cout, 1, 1, 1), true);
    u.stride = stride;
    params_.emplace_back(name + ".weight", u.weight);
    params_.emplace_back(name + ".bias", u.bias);
    params_.emplace_back(name + ".norm.gamma", u.gamma);
    params_.emplace_back(name + ".norm.beta", u.beta);
    return u;
  };

  const int levels = cfg_.num_downsamples;
  for (int s = 0; s <= levels; ++s) {
    std::vector<ConvUnit> stage;
    const Index c = cfg_.channels(s);
    for (int u = 0; u < cfg_.convs_per_stage; ++u) {
      const Index cin = u > 0 ? c : (s == 0 ? cfg_.in_channels : cfg_.channels(s - 1));
      const int stride = (u == 0 && s > 0) ? 2 : 1;
      stage.push_back(make_unit("enc" + std::to_string(s) + ".conv" + std::to_string(u), cin, c, stride));
    }
    encoder_.push_back(std::move(stage));
  }
  upsamplers_.resize(static_cast<size_t>(levels));
  decoder_.resize(static_cast<size_t>(levels));
  heads_.resize(static_cast<size_t>(cfg_.deep_supervision_heads));
  for (int s = levels - 1; s >= 0; --s) {
    const Index c = cfg_.channels(s), below = cfg_.channels(s + 1);
    const std::string prefix = "dec" + std::to_string(s);
    upsamplers_[static_cast<size_t>(s)] = he_normal(Shape(below, c, 2, 2, 2), c * 8);
    params_.emplace_back(prefix + ".up.weight", upsamplers_[static_cast<size_t>(s)]);
    for (int u = 0; u < cfg_.convs_per_stage; ++u)
      decoder_[static_cast<size_t>(s)].push_back(make_unit(prefix + ".conv" + std::to_string(u), u == 0 ? 2 * c : c, c, 1));
    if (s < cfg_.deep_supervision_heads) {
      Head h;
      h.weight = he_normal(Shape(cfg_.out_channels, c, 1, 1, 1), c);
      h.bias = Tensor<S>(Shape(1, cfg_.out_channels, 1, 1, 1), true);
      params_.emplace_back("head" + std::to_string(s) + ".weight", h.weight);
      params_.emplace_back("head" + std::to_string(s) + ".bias", h.bias);
      heads_[static_cast<size_t>(s)] = h;
    }
  }
}

template <typename S>
Tensor<S> UNet<S>::run_unit(Tape<S>& tape, const ConvUnit& u, const Tensor<S>& x) const {
  const int pad = (cfg_.kernel - 1) / 2;
  auto y = conv3d(tape, x, u.weight, u.bias, u.stride, pad);
  y = instance_norm(tape, y, u.gamma, u.beta, static_cast<S>(cfg_.norm_eps));
  return leaky_relu(tape, y, static_cast<S>(cfg_.leaky_slope));
}

template <typename S>
UNetOutputs<S> UNet<S>::forward(Tape<S>& tape, const Tensor<S>& x) const {
  const Shape& xs = x.shape();
  if (xs.c() != cfg_.in_channels)
    throw ParameterError("unet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " + xs.str());
  const Index div = cfg_.patch_divisor();
  if (xs.d() % div || xs.h() % div || xs.w() % div)
    throw ParameterError("unet: spatial extent " + xs.str() + " not divisible by " + std::to_string(div));

  const int levels = cfg_.num_downsamples;
  std::vector<Tensor<S>> skips;
  Tensor<S> h = x;
  for (int s = 0; s <= levels; ++s) {
    for (const auto& u : encoder_[static_cast<size_t>(s)]) h = run_unit(tape, u, h);
    if (s < levels) skips.push_back(h);
  }
  std::vector<Tensor<S>> head_out(static_cast<size_t>(cfg_.deep_supervision_heads));
  for (int s = levels - 1; s >= 0; --s) {
    h = conv3d_transpose(tape, h, upsamplers_[static_cast<size_t>(s)], 2);
    h = concat_channels(tape, h, skips[static_cast<size_t>(s)]);
    for (const auto& u : decoder_[static_cast<size_t>(s)]) h = run_unit(tape, u, h);
    if (s < cfg_.deep_supervision_heads) {
      const Head& hd = heads_[static_cast<size_t>(s)];
      head_out[static_cast<size_t>(s)] = sigmoid(tape, conv3d(tape, h, hd.weight, hd.bias, 1, 0));
    }
  }
  UNetOutputs<S> out;
  out.main = head_out[0];
  out.aux.assign(head_out.begin() + 1, head_out.end());
  return out;
}

template <typename S>
Index UNet<S>::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename S>
UNet<S> UNet<S>::clone() const {
  UNet copy(cfg_, 0);
  for (size_t i = 0; i < params_.size(); ++i) copy.params_[i].second.value() = params_[i].second.value();
  return copy;
}

template <typename S>
void UNet<S>::save(const std::filesystem::path& stem, const json& extra) const {
  json meta = extra;
  meta["unet_config"] = cfg_;
  save_checkpoint(stem, params_, meta);
}

template <typename S>
UNet<S> UNet<S>::load(const std::filesystem::path& stem) {
  const Checkpoint ck = load_checkpoint(stem);
  if (!ck.manifest.contains("unet_config")) throw FormatError("unet_config", "checkpoint has no embedded UNetConfig");
  UNet model(ck.manifest["unet_config"].get<UNetConfig>(), 0);
  assign_tensors(ck, model.params_);
  return model;
}

std::vector<BinaryMask> downsample_targets(const BinaryMask& gt, int levels) {
  if (levels < 0) throw ParameterError("downsample_targets: negative level count");
  const Dims& g = gt.dims();
  const Index div = Index{1} << levels;
  if (g.d % div || g.h % div || g.w % div)
    throw ParameterError("downsample_targets: dims not divisible by 2^" + std::to_string(levels));
  std::vector<BinaryMask> out{gt};
  for (int l = 0; l < levels; ++l) {
    const BinaryMask& prev = out.back();
    const Dims pd = prev.dims();
    Spacing sp(prev.spacing().sx * 2, prev.spacing().sy * 2, prev.spacing().sz * 2);
    BinaryMask next({pd.d / 2, pd.h / 2, pd.w / 2}, sp);
    for (Index z = 0; z < pd.d; ++z)
      for (Index y = 0; y < pd.h; ++y)
        for (Index x = 0; x < pd.w; ++x)
          if (prev(z, y, x)) next.set(z / 2, y / 2, x / 2, true);
    out.push_back(std::move(next));
  }
  return out;
}

template <typename S>
Tensor<S> max_downsample2(const Tensor<S>& x) {
  const Shape& s = x.shape();
  if (s.d() % 2 || s.h() % 2 || s.w() % 2) throw ParameterError("max_downsample2: odd extent " + s.str());
  Shape o(s.n(), s.c(), s.d() / 2, s.h() / 2, s.w() / 2);
  Tensor<S> y(o, Tensor<S>::Array::Constant(o.numel(), std::numeric_limits<S>::lowest()));
  for (Index nc = 0; nc < s.n() * s.c(); ++nc)
    for (Index z = 0; z < s.d(); ++z)
      for (Index yy = 0; yy < s.h(); ++yy)
        for (Index xx = 0; xx < s.w(); ++xx) {
          S& dst = y.value()[((nc * o.d() + z / 2) * o.h() + yy / 2) * o.w() + xx / 2];
          dst = std::max(dst, x.value()[((nc * s.d() + z) * s.h() + yy) * s.w() + xx]);
        }
  return y;
}

template struct UNetOutputs<float>;
template struct UNetOutputs<double>;
template class UNet<float>;
template class UNet<double>;
template Tensor<float> max_downsample2(const Tensor<float>&);
template Tensor<double> max_downsample2(const Tensor<double>&);

}  // namespace vesselseg
