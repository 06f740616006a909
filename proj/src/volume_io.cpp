#include "vesselseg/volume_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace vesselseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool is_nrrd(const fs::path& p) { return p.extension() == ".nrrd"; }

fs::path fixture_stem(const fs::path& p) {
  fs::path s = p;
  if (s.extension() == ".f32" || s.extension() == ".json") s.replace_extension();
  return s;
}

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  return fs::path(stem.string() + suffix);
}

std::vector<char> read_all(std::istream& in) {
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

void floats_from_le(const char* bytes, Index n, float* out) {
  std::memcpy(out, bytes, static_cast<size_t>(n) * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (Index i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &out[i], 4);
      u = byteswap32(u);
      std::memcpy(&out[i], &u, 4);
    }
  }
}

void write_floats_le(std::ostream& os, const float* data, Index n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (Index i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &data[i], 4);
      u = byteswap32(u);
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- fixture

Volume load_fixture(const fs::path& any) {
  const fs::path stem = fixture_stem(any);
  const fs::path meta_path = with_suffix(stem, ".json");
  const fs::path data_path = with_suffix(stem, ".f32");
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw FormatError("sidecar", "cannot open " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw FormatError("sidecar", e.what());
  }
  if (!meta.contains("dims") || !meta["dims"].is_array() || meta["dims"].size() != 3)
    throw FormatError("dims", "expected [D,H,W]");
  if (!meta.contains("spacing_mm") || !meta["spacing_mm"].is_array() || meta["spacing_mm"].size() != 3)
    throw FormatError("spacing_mm", "expected [sx,sy,sz]");
  Dims dims;
  for (int a = 0; a < 3; ++a) {
    if (!meta["dims"][a].is_number_integer() || meta["dims"][a].get<Index>() <= 0)
      throw FormatError("dims", "entries must be positive integers");
    dims[a] = meta["dims"][a].get<Index>();
  }
  std::array<double, 3> sp{};
  for (int a = 0; a < 3; ++a) {
    if (!meta["spacing_mm"][a].is_number() || !(meta["spacing_mm"][a].get<double>() > 0))
      throw FormatError("spacing_mm", "entries must be positive numbers");
    sp[a] = meta["spacing_mm"][a].get<double>();
  }

  std::ifstream din(data_path, std::ios::binary);
  if (!din) throw FormatError("payload", "cannot open " + data_path.string());
  const auto bytes = read_all(din);
  const auto expected = static_cast<size_t>(dims.count()) * sizeof(float);
  if (bytes.size() < expected)
    throw FormatError("payload", "truncated: expected " + std::to_string(dims.count()) + " floats, found " +
                                     std::to_string(bytes.size() / sizeof(float)));
  if (bytes.size() > expected)
    throw FormatError("payload", "payload larger than dims declare");
  Volume::Array data(dims.count());
  floats_from_le(bytes.data(), dims.count(), data.data());
  return Volume(dims, Spacing(sp[0], sp[1], sp[2]), std::move(data));
}

void save_fixture(const Volume& v, const fs::path& any) {
  const fs::path stem = fixture_stem(any);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  json meta;
  meta["dims"] = {v.dims().d, v.dims().h, v.dims().w};
  meta["spacing_mm"] = {v.spacing().sx, v.spacing().sy, v.spacing().sz};
  std::ofstream mo(with_suffix(stem, ".json"));
  mo << meta.dump(2) << "\n";
  std::ofstream dout(with_suffix(stem, ".f32"), std::ios::binary);
  write_floats_le(dout, v.data().data(), v.size());
  if (!dout) throw Error("failed writing " + with_suffix(stem, ".f32").string());
}

// ---------------------------------------------------------------- NRRD

struct NrrdHeader {
  bool is_uint8 = false;
  Dims dims;
  Spacing spacing;
};

Spacing parse_space_directions(const std::string& value) {
  // Expect three parenthesized vectors; only diagonal entries may be nonzero.
  std::array<std::array<double, 3>, 3> m{};
  size_t pos = 0;
  for (int row = 0; row < 3; ++row) {
    const auto open = value.find('(', pos);
    const auto close = value.find(')', open);
    if (open == std::string::npos || close == std::string::npos)
      throw FormatError("space directions", "expected three (a,b,c) vectors");
    std::string inner = value.substr(open + 1, close - open - 1);
    std::replace(inner.begin(), inner.end(), ',', ' ');
    std::istringstream is(inner);
    for (int c = 0; c < 3; ++c)
      if (!(is >> m[row][c])) throw FormatError("space directions", "malformed vector");
    pos = close + 1;
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (r != c && m[r][c] != 0.0) throw FormatError("space directions", "only diagonal directions are supported");
  for (int r = 0; r < 3; ++r)
    if (!(m[r][r] > 0.0)) throw FormatError("space directions", "diagonal entries must be positive");
  return Spacing(m[0][0], m[1][1], m[2][2]);
}

Volume load_nrrd(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("file", "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("NRRD000", 0) != 0) throw FormatError("magic", "not an NRRD file");

  NrrdHeader h;
  bool have_dimension = false, have_type = false, have_sizes = false, have_dirs = false, have_encoding = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;
    if (line[0] == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string::npos) throw FormatError("header", "malformed line '" + line + "'");
    const std::string key = trim(line.substr(0, colon));
    std::string value = line.substr(colon + 1);
    if (!value.empty() && value[0] == '=') value.erase(0, 1);  // key:=value
    value = trim(value);

    if (key == "dimension") {
      if (value != "3") throw FormatError("dimension", "only 3D volumes are supported, got " + value);
      have_dimension = true;
    } else if (key == "type") {
      if (value == "float") {
        h.is_uint8 = false;
      } else if (value == "uint8" || value == "uchar" || value == "unsigned char" || value == "uint8_t") {
        h.is_uint8 = true;
      } else {
        throw FormatError("type", "unsupported type '" + value + "'");
      }
      have_type = true;
    } else if (key == "sizes") {
      std::istringstream is(value);
      Index w = 0, hh = 0, d = 0;
      if (!(is >> w >> hh >> d) || w <= 0 || hh <= 0 || d <= 0)
        throw FormatError("sizes", "expected three positive sizes");
      std::string extra;
      if (is >> extra) throw FormatError("sizes", "expected exactly three sizes");
      h.dims = {d, hh, w};
      have_sizes = true;
    } else if (key == "space directions") {
      h.spacing = parse_space_directions(value);
      have_dirs = true;
    } else if (key == "encoding") {
      if (value != "raw") throw FormatError("encoding", "only raw encoding is supported, got " + value);
      have_encoding = true;
    } else if (key == "endian") {
      if (value != "little") throw FormatError("endian", "only little-endian is supported");
    } else if (key == "space dimension") {
      if (value != "3") throw FormatError("space dimension", "must be 3");
    } else if (key == "kinds") {
      std::istringstream is(value);
      std::string k;
      while (is >> k)
        if (k != "domain" && k != "space") throw FormatError("kinds", "unsupported kind '" + k + "'");
    } else if (key == "space" || key == "space origin" || key == "content") {
      // informational
    } else {
      throw FormatError(key, "unsupported field");
    }
  }
  if (!have_dimension) throw FormatError("dimension", "missing");
  if (!have_type) throw FormatError("type", "missing");
  if (!have_sizes) throw FormatError("sizes", "missing");
  if (!have_encoding) throw FormatError("encoding", "missing");
  if (!have_dirs) h.spacing = Spacing(1, 1, 1);

  const auto bytes = read_all(in);
  const Index n = h.dims.count();
  const size_t elem = h.is_uint8 ? 1 : sizeof(float);
  if (bytes.size() < static_cast<size_t>(n) * elem)
    throw FormatError("payload", "truncated: expected " + std::to_string(n) + " voxels, found " +
                                     std::to_string(bytes.size() / elem));
  if (bytes.size() > static_cast<size_t>(n) * elem) throw FormatError("payload", "payload larger than sizes declare");
  Volume::Array data(n);
  if (h.is_uint8) {
    for (Index i = 0; i < n; ++i) data[i] = static_cast<float>(static_cast<unsigned char>(bytes[i]));
  } else {
    floats_from_le(bytes.data(), n, data.data());
  }
  return Volume(h.dims, h.spacing, std::move(data));
}

void write_nrrd_header(std::ostream& os, const Dims& d, const Spacing& s, const char* type) {
  os << "NRRD0004\n"
     << "type: " << type << "\n"
     << "dimension: 3\n"
     << "space dimension: 3\n"
     << "sizes: " << d.w << " " << d.h << " " << d.d << "\n"
     << "space directions: (" << fmt_double(s.sx) << ",0,0) (0," << fmt_double(s.sy) << ",0) (0,0,"
     << fmt_double(s.sz) << ")\n"
     << "kinds: domain domain domain\n"
     << "endian: little\n"
     << "encoding: raw\n\n";
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

}  // namespace

Volume load_volume(const fs::path& path) { return is_nrrd(path) ? load_nrrd(path) : load_fixture(path); }

void save_volume(const Volume& v, const fs::path& path) {
  if (!is_nrrd(path)) return save_fixture(v, path);
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  write_nrrd_header(os, v.dims(), v.spacing(), "float");
  write_floats_le(os, v.data().data(), v.size());
}

BinaryMask load_mask(const fs::path& path) { return volume_to_mask(load_volume(path)); }

void save_mask(const BinaryMask& m, const fs::path& path) {
  if (!is_nrrd(path)) return save_fixture(mask_to_volume(m), path);
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  write_nrrd_header(os, m.dims(), m.spacing(), "uint8");
  os.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.data().size()));
}

Volume mask_to_volume(const BinaryMask& m) {
  Volume v(m.dims(), m.spacing());
  for (Index i = 0; i < m.size(); ++i) v.data()[i] = m.at(i) ? 1.0f : 0.0f;
  return v;
}

BinaryMask volume_to_mask(const Volume& v, float threshold) {
  BinaryMask m(v.dims(), v.spacing());
  for (Index i = 0; i < v.size(); ++i) m.data()[i] = v.data()[i] > threshold ? 1 : 0;
  return m;
}

}  // namespace vesselseg
