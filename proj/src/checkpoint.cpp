#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kmax/model.hpp"

namespace kmax {

namespace {

constexpr const char* kMagic = "KMAXCKPT1";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_field(const std::string& text) {
  Shape s;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) s.push_back(std::stoul(part));
  return s;
}

}  // namespace

// Layout:
//   KMAXCKPT1
//   manifest_bytes <n>
//   <n bytes of manifest text>
//   <raw float64 data>
// The manifest holds "config_lines <k>", k lines of config text, then one
// "param <name> <d0xd1..> <byte offset>" line per parameter.
void save_checkpoint(const std::string& path, const Config& config, const KMaxModel& model) {
  const std::string cfg = config.serialize();
  std::size_t lines = 0;
  for (char ch : cfg) lines += ch == '\n';
  std::ostringstream manifest;
  manifest << "config_lines " << lines << '\n' << cfg;
  std::size_t offset = 0;
  for (const auto& p : model.parameters().entries()) {
    manifest << "param " << p.name << ' ' << shape_field(p.tensor.shape()) << ' ' << offset << '\n';
    offset += p.tensor.numel() * sizeof(double);
  }
  const std::string text = manifest.str();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << kMagic << '\n' << "manifest_bytes " << text.size() << '\n' << text;
  for (const auto& p : model.parameters().entries()) {
    const auto v = p.tensor.data();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string line;
  std::getline(in, line);
  if (line != kMagic) throw IoError(path + ": not a KMAXCKPT1 checkpoint");
  std::size_t bytes = 0;
  {
    std::getline(in, line);
    std::istringstream h(line);
    std::string key;
    if (!(h >> key >> bytes) || key != "manifest_bytes") throw IoError(path + ": bad manifest header");
  }
  std::string text(bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError(path + ": truncated manifest");

  std::istringstream manifest(text);
  std::size_t lines = 0;
  {
    std::getline(manifest, line);
    std::istringstream h(line);
    std::string key;
    if (!(h >> key >> lines) || key != "config_lines") throw IoError(path + ": missing config block");
  }
  std::string cfg_text;
  for (std::size_t i = 0; i < lines && std::getline(manifest, line); ++i) cfg_text += line + '\n';
  Config config = Config::parse(cfg_text);

  KMaxModel model(config.model, 0);
  const auto& entries = model.parameters().entries();
  std::size_t index = 0;
  std::vector<std::size_t> offsets;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string tag, name, shape;
    std::size_t offset = 0;
    if (!(row >> tag >> name >> shape >> offset) || tag != "param") {
      throw IoError(path + ": bad manifest line '" + line + "'");
    }
    if (index >= entries.size() || entries[index].name != name ||
        entries[index].tensor.shape() != parse_shape_field(shape)) {
      throw IoError(path + ": parameter '" + name + "' does not match the configured model");
    }
    offsets.push_back(offset);
    ++index;
  }
  if (index != entries.size()) throw IoError(path + ": parameter count mismatch");

  const auto data_start = in.tellg();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    auto v = t.mutable_data();
    in.seekg(data_start + static_cast<std::streamoff>(offsets[i]));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw IoError(path + ": truncated data for '" + entries[i].name + "'");
  }
  return {std::move(config), std::move(model)};
}

}  // namespace kmax
