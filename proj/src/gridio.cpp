#include "equireg/gridio.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace equireg {

static_assert(sizeof(float) == 4);

namespace {

std::uint32_t to_le(float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return u;
}

float from_le(std::uint32_t u) {
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

[[noreturn]] void bad(const std::string& path, std::size_t offset, const std::string& why) {
  throw DataError(path + ": malformed grid file at byte " + std::to_string(offset) + ": " + why);
}

}  // namespace

void write_grid(const std::string& path, const GradGrid& grid) {
  if (grid.shape().size() < 2)
    throw ShapeError("write_grid: need {c, n1..nD}, got " + shape_str(grid.shape()));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot open for writing");
  std::ostringstream header;
  header << "GRID " << grid.dim() << ' ' << grid.channels();
  for (int e : grid.spatial()) header << ' ' << e;
  header << '\n';
  f << header.str();
  std::vector<std::uint32_t> raw(grid.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_le(grid.at(i));
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * 4));
  if (!f) throw DataError(path + ": write failed");
}

GradGrid read_grid(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(path + ": cannot open");
  std::string header;
  if (!std::getline(f, header)) bad(path, 0, "missing header line");
  std::size_t header_bytes = header.size() + 1;
  std::istringstream hs(header);
  std::string magic;
  int d = 0, c = 0;
  if (!(hs >> magic) || magic != "GRID") bad(path, 0, "expected GRID magic");
  if (!(hs >> d) || d < 1 || d > 8) bad(path, 5, "bad dimension count");
  if (!(hs >> c) || c < 1) bad(path, 7, "bad channel count");
  Shape shape{c};
  for (int i = 0; i < d; ++i) {
    int n = 0;
    if (!(hs >> n) || n < 1) bad(path, header_bytes - 1, "bad spatial extent");
    shape.push_back(n);
  }
  std::string trailing;
  if (hs >> trailing) bad(path, header_bytes - 1, "trailing tokens in header");

  std::size_t count = shape_numel(shape);
  std::vector<std::uint32_t> raw(count);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * 4));
  std::size_t got = static_cast<std::size_t>(f.gcount());
  if (got != count * 4)
    bad(path, header_bytes + got, "expected " + std::to_string(count * 4) +
                                      " payload bytes, got " + std::to_string(got));
  char extra;
  if (f.read(&extra, 1))
    bad(path, header_bytes + count * 4, "trailing bytes after payload");

  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = from_le(raw[i]);
  return GradGrid(std::move(shape), std::move(data));
}

void save_checkpoint(const std::string& dir, const std::vector<const Param*>& params) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw DataError(dir + ": cannot write manifest");
  int idx = 0;
  for (const Param* p : params) {
    std::string file = "p" + std::to_string(idx++) + ".grid";
    Shape s = p->shape;
    if (s.size() < 2) s = Shape{1, static_cast<int>(p->value.size())};
    write_grid(dir + "/" + file, GradGrid(s, p->value));
    manifest << p->name << ' ' << file << '\n';
  }
}

void load_checkpoint(const std::string& dir, const std::vector<Param*>& params) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw DataError(dir + "/manifest.txt: cannot open");
  std::map<std::string, std::string> files;
  std::string name, file;
  while (manifest >> name >> file) files[name] = file;
  for (Param* p : params) {
    auto it = files.find(p->name);
    if (it == files.end()) throw DataError(dir + ": checkpoint is missing parameter " + p->name);
    GradGrid g = read_grid(dir + "/" + it->second);
    if (g.size() != p->value.size())
      throw DataError(dir + ": parameter " + p->name + " has " + std::to_string(g.size()) +
                      " values, expected " + std::to_string(p->value.size()));
    p->value = g.vec();
  }
}

}  // namespace equireg
