#include "fedcpc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fedcpc/errors.hpp"

namespace fedcpc::cpc {

namespace {

constexpr std::string_view kMagic = "FEDCPC-CHECKPOINT 1\n";
constexpr std::string_view kEndHeader = "end_header\n";

void append_le(std::string& out, double value) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string_view take_line(std::string_view bytes, std::size_t& pos, std::size_t line_no) {
  std::size_t nl = bytes.find('\n', pos);
  if (nl == std::string_view::npos) throw ParseError("checkpoint", line_no, "unterminated header line");
  std::string_view line = bytes.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

}  // namespace

std::string checkpoint_header(const ModelParams& params) {
  std::ostringstream out;
  out << kMagic << "tensors " << params.layout().size() << '\n';
  for (const auto& spec : params.layout()) {
    out << spec.name << ' ' << spec.shape.size();
    for (std::size_t d : spec.shape) out << ' ' << d;
    out << '\n';
  }
  out << kEndHeader;
  return out.str();
}

std::string serialize_checkpoint(const ModelParams& params, std::string_view metadata) {
  std::string out = checkpoint_header(params);
  out.reserve(out.size() + 8 * params.flat_size() + metadata.size() + 32);
  for (const auto& t : params.tensors())
    for (double v : t.values()) append_le(out, v);
  out += "meta " + std::to_string(metadata.size()) + "\n";
  out += metadata;
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kMagic)) throw ParseError("checkpoint", 1, "bad magic");
  std::size_t pos = kMagic.size();
  std::size_t line_no = 2;
  std::size_t count = 0;
  {
    std::istringstream in(std::string(take_line(bytes, pos, line_no)));
    std::string word;
    if (!(in >> word >> count) || word != "tensors") throw ParseError("checkpoint", line_no, "expected 'tensors <n>'");
  }
  std::vector<ParamSpec> layout;
  for (std::size_t i = 0; i < count; ++i) {
    ++line_no;
    std::istringstream in(std::string(take_line(bytes, pos, line_no)));
    ParamSpec spec;
    std::size_t rank = 0;
    if (!(in >> spec.name >> rank)) throw ParseError("checkpoint", line_no, "expected '<name> <rank> <dims>'");
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t dim = 0;
      if (!(in >> dim) || dim == 0) throw ParseError("checkpoint", line_no, "bad dimension");
      spec.shape.push_back(dim);
    }
    layout.push_back(std::move(spec));
  }
  ++line_no;
  if (take_line(bytes, pos, line_no) != "end_header") throw ParseError("checkpoint", line_no, "expected end_header");

  std::vector<ad::Tensor> tensors;
  for (const auto& spec : layout) {
    std::size_t n = ad::shape_size(spec.shape);
    if (pos + 8 * n > bytes.size()) throw ParseError("checkpoint", line_no, "payload truncated at " + spec.name);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_le(bytes.data() + pos + 8 * i);
    pos += 8 * n;
    tensors.emplace_back(spec.shape, std::move(values));
  }
  Checkpoint ck{ModelParams(std::move(layout), std::move(tensors)), {}};
  if (pos < bytes.size()) {
    std::string_view meta_line = take_line(bytes, pos, line_no);
    if (!meta_line.starts_with("meta ")) throw ParseError("checkpoint", line_no, "expected meta block");
    std::size_t len = std::stoull(std::string(meta_line.substr(5)));
    if (pos + len != bytes.size()) throw ParseError("checkpoint", line_no, "meta length mismatch");
    ck.metadata = std::string(bytes.substr(pos, len));
  }
  return ck;
}

void save_checkpoint(const std::string& path, const ModelParams& params, std::string_view metadata) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  std::string bytes = serialize_checkpoint(params, metadata);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace fedcpc::cpc
