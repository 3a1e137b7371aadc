#include "mmnet/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmnet {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("mmt: truncated ") + what);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

}  // namespace

void write_mmt(std::ostream& out, const Tensor<float>& t) {
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
}

Tensor<float> read_mmt(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("mmt: bad magic");
  const std::uint32_t rank = get_u32(in, "rank");
  if (rank > 16) throw FormatError("mmt: implausible rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t k = 0; k < rank; ++k) {
    const std::uint32_t d = get_u32(in, "extent");
    if (d == 0) throw FormatError("mmt: zero extent");
    shape.push_back(d);
  }
  Tensor<float> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = std::bit_cast<float>(get_u32(in, "data"));
  return t;
}

void write_mmt(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  write_mmt(out, t);
  if (!out) throw FormatError("write failed for " + path.string());
}

Tensor<float> read_mmt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return read_mmt(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params,
                     const Meta& meta) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError("cannot write manifest in " + dir.string());
  for (const auto& [name, p] : params) {
    manifest << name << ' ' << p.value.rank();
    for (Index d : p.value.shape()) manifest << ' ' << d;
    manifest << '\n';
    write_mmt(dir / (name + ".mmt"), p.value);
  }
  std::ofstream m(dir / "meta.txt");
  for (const auto& [k, v] : meta) m << k << " = " << v << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw FormatError("no manifest.txt in " + dir.string());
  std::string line;
  while (std::getline(manifest, line)) {
    if (trim(line).empty()) continue;
    std::istringstream ss(line);
    std::string name;
    Index rank = 0;
    ss >> name >> rank;
    Shape shape(static_cast<std::size_t>(std::max<Index>(rank, 0)));
    for (auto& d : shape) ss >> d;
    if (!ss || rank < 0) throw FormatError("manifest: malformed line '" + line + "'");
    auto value = read_mmt(dir / (name + ".mmt"));
    if (value.shape() != shape) {
      throw FormatError("checkpoint: " + name + " has shape " + shape_string(value.shape()) +
                        ", manifest says " + shape_string(shape));
    }
    ck.params.add(name, shape).value = std::move(value);
  }
  std::ifstream meta(dir / "meta.txt");
  while (meta && std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    ck.meta[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return ck;
}

void assign_parameters(ParameterSet<float>& params, const ParameterSet<float>& from) {
  if (params.size() != from.size()) {
    throw FormatError("checkpoint has " + std::to_string(from.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (auto& [name, p] : params) {
    if (!from.contains(name)) throw FormatError("checkpoint lacks parameter " + name);
    const auto& v = from.at(name).value;
    if (v.shape() != p.value.shape()) {
      throw FormatError("checkpoint parameter " + name + " has shape " + shape_string(v.shape()) +
                        ", model expects " + shape_string(p.value.shape()));
    }
    p.value = v;
  }
}

}  // namespace mmnet
