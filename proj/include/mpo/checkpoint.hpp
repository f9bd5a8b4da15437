#pragma once

#include <filesystem>
#include <string>

#include "mpo/init.hpp"
#include "mpo/mpo.hpp"
#include "mpo/transformer.hpp"

namespace mpo {

/// Checkpoints are directories holding a UTF-8 JSON manifest plus one binary
/// blob of little-endian 64-bit floats. Writes go to temporary names followed
/// by atomic renames; save-then-load is bit-exact.
///
/// Index convention recorded in every manifest: tensors are row-major and
/// mixed-radix indices are big-endian (most significant factor first) on both
/// rows and columns.

constexpr int kCheckpointFormatVersion = 1;

void save_model(const ToyTransformer& model, const std::filesystem::path& dir);
ToyTransformer load_model(const std::filesystem::path& dir);

void save_donor(const DonorCheckpoint& donor, const std::filesystem::path& dir);
DonorCheckpoint load_donor(const std::filesystem::path& dir);

void save_matrix(const DenseTensor& matrix, const std::filesystem::path& dir);
DenseTensor load_matrix(const std::filesystem::path& dir);

void save_mpo(const MpoTensorSet& set, const std::filesystem::path& dir);
MpoTensorSet load_mpo(const std::filesystem::path& dir);

/// Kind tag stored in a checkpoint manifest ("model", "donor", "matrix", "mpo").
std::string checkpoint_kind(const std::filesystem::path& dir);

}  // namespace mpo
