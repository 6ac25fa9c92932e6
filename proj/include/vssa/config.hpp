#pragma once

#include <filesystem>

#include "vssa/model.hpp"

namespace vssa {

// Desk-scale defaults throughout; the full-paper values stay reachable
// through the config file (base_size = 300, width_multiplier = 1, ...).
struct TrainConfig {
    double learning_rate = 3e-4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 4;
    std::vector<double> scales = {0.75, 1.0, 1.25};
    double alpha = 0.1;
    int iterations = 500;
    std::uint64_t seed = 1;
    ModelConfig model;  // base_size lives here as model.input_size

    void validate() const {
        if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
        if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (scales.empty()) throw ConfigError("scales must be non-empty");
        for (double s : scales)
            if (s <= 0) throw ConfigError("scales must be positive");
        if (alpha < 0) throw ConfigError("alpha must be >= 0");
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
        model.validate();
    }
};

// Applies one `key = value` assignment; unknown keys raise ConfigError.
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);

// Line-based config file: `key = value`, '#' comments, blank lines ignored.
// Errors carry the file name and line number.
TrainConfig parse_train_config(const std::filesystem::path& path);

// The fully resolved configuration, parseable by parse_train_config.
std::string render_config(const TrainConfig& cfg);

}  // namespace vssa
