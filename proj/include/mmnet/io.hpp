#pragma once

// MMT1 tensor files: "MMT1", u32 rank, rank x u32 extents, row-major f32 data, all little
// endian. A checkpoint is a directory holding one <name>.mmt per parameter, manifest.txt
// ("name rank d0 d1 ...", one line per parameter) and meta.txt (key = value lines).

#include "mmnet/params.hpp"

#include <filesystem>
#include <iosfwd>

namespace mmnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_mmt(std::ostream& out, const Tensor<float>& t);
Tensor<float> read_mmt(std::istream& in);
void write_mmt(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_mmt(const std::filesystem::path& path);

using Meta = std::map<std::string, std::string>;

struct Checkpoint {
  ParameterSet<float> params;
  Meta meta;
};

void save_checkpoint(const std::filesystem::path& dir, const ParameterSet<float>& params,
                     const Meta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Copies checkpoint values into `params`; names and shapes must match exactly.
void assign_parameters(ParameterSet<float>& params, const ParameterSet<float>& from);

}  // namespace mmnet
