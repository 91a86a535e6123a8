#include "multitalk/checkpoint.hpp"

#include "multitalk/binary_io.hpp"
#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include <cmath>

namespace multitalk {

namespace {
constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};
}

const ad::Matrix& CheckpointFile::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

std::string encode_checkpoint(const CheckpointFile& file) {
  nlohmann::json header;
  header["kind"] = file.kind;
  header["meta"] = file.meta;
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, m] : file.tensors) {
    table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()},
                     {"offset", offset}});
    offset += static_cast<std::size_t>(m.size());
  }
  header["tensors"] = table;
  const std::string header_text = header.dump();

  std::string out;
  out.append(kMagic, 4);
  binary::put<std::uint32_t>(out, kCheckpointVersion);
  binary::put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& [name, m] : file.tensors) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) binary::put<double>(out, m(r, c));
    }
  }
  return out;
}

CheckpointFile decode_checkpoint(const std::string& bytes) {
  binary::Reader in(bytes);
  auto magic = in.bytes(4, "magic");
  if (magic != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = in.get<std::uint64_t>("header length");
  auto header_text = in.bytes(static_cast<std::size_t>(header_len), "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  CheckpointFile file;
  file.kind = header.at("kind").get<std::string>();
  file.meta = header.at("meta");
  const std::size_t payload_start = in.position();
  std::size_t total = 0;
  for (const auto& t : header.at("tensors")) {
    total += t.at("rows").get<std::size_t>() * t.at("cols").get<std::size_t>();
  }
  if (in.remaining() != total * sizeof(double)) {
    throw FormatError("checkpoint payload size mismatch: expected " +
                      std::to_string(total * sizeof(double)) + " bytes, found " +
                      std::to_string(in.remaining()));
  }
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::size_t>();
    binary::Reader body(std::string_view(bytes).substr(payload_start + offset * sizeof(double)));
    ad::Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = body.get<double>("tensor");
    }
    if (!m.allFinite()) {
      throw NonFiniteError("checkpoint tensor '" + t.at("name").get<std::string>() +
                           "' contains non-finite values");
    }
    file.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return file;
}

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(file));
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void append_parameters(CheckpointFile& file, const ad::ParameterStore& store,
                       const std::string& prefix) {
  for (const ad::Parameter* p : store.all()) {
    file.tensors.emplace_back(prefix + p->name, p->value);
  }
}

void restore_parameters(const CheckpointFile& file, ad::ParameterStore& store,
                        const std::string& prefix) {
  for (ad::Parameter* p : store.all()) {
    const ad::Matrix& m = file.tensor(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw FormatError("checkpoint tensor '" + prefix + p->name + "' has shape " +
                        std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                        ", model expects " + std::to_string(p->value.rows()) + "x" +
                        std::to_string(p->value.cols()));
    }
    p->value = m;
  }
}

}  // namespace multitalk
