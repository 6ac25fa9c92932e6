#pragma once

#include <filesystem>

#include "vssa/model.hpp"

namespace vssa {

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

// Container format, version 1: magic "VSSA", then little-endian u32 version,
// u32 tensor count, and per tensor u16 name length + UTF-8 name + u8 rank +
// u32 dims + raw little-endian f32 data.
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Model-level packing. Alongside every parameter (and optional momentum
// buffer under "opt.<name>") two meta tensors ride along: "__meta.iteration"
// and "__meta.config", so a checkpoint alone reconstructs the architecture.
std::vector<NamedTensor> pack_model(const DetectorModel<float>& model, std::uint32_t iteration, bool with_velocity);
ModelConfig config_from_checkpoint(const std::vector<NamedTensor>& tensors);
std::uint32_t iteration_from_checkpoint(const std::vector<NamedTensor>& tensors);

// Installs parameter (and momentum) values into a model built with a
// matching config. Missing tensors, unknown tensors and shape mismatches all
// raise FormatError naming the offending tensor.
void unpack_into_model(DetectorModel<float>& model, const std::vector<NamedTensor>& tensors);

}  // namespace vssa
