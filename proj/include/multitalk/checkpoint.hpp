#pragma once

// Self-describing checkpoint container:
//
//   "MTCK" | u32 version | u64 header length | JSON header | f64 payload
//
// The JSON header carries `kind`, free-form `meta`, and a tensor table
// [{name, rows, cols, offset}] with offsets counted in doubles from the start
// of the payload. Tensors are stored row-major.

#include "multitalk/autograd.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace multitalk {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, ad::Matrix>> tensors;

  const ad::Matrix& tensor(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(const std::string& bytes);

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

// Helpers to move whole parameter stores in and out of a checkpoint.
void append_parameters(CheckpointFile& file, const ad::ParameterStore& store,
                       const std::string& prefix = "");
// Overwrites every parameter in `store` from the file; shapes must match.
void restore_parameters(const CheckpointFile& file, ad::ParameterStore& store,
                        const std::string& prefix = "");

}  // namespace multitalk
