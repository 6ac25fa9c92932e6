#include "vssa/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace vssa {

namespace {

double to_double(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    double v;
    std::string extra;
    if (!(is >> v) || (is >> extra)) throw ConfigError(key + ": expected a number, got '" + value + "'");
    return v;
}

int to_int(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    long long v;
    std::string extra;
    if (!(is >> v) || (is >> extra)) throw ConfigError(key + ": expected an integer, got '" + value + "'");
    return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    std::istringstream is(value);
    std::uint64_t v;
    std::string extra;
    if (!(is >> v) || (is >> extra)) throw ConfigError(key + ": expected an unsigned integer, got '" + value + "'");
    return v;
}

std::vector<double> to_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::string item;
    std::istringstream is(value);
    while (std::getline(is, item, ',')) out.push_back(to_double(key, item));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list, got '" + value + "'");
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);  // round-trips doubles exactly
    return buf;
}

}  // namespace

void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "learning_rate") cfg.learning_rate = to_double(key, value);
    else if (key == "momentum") cfg.momentum = to_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = to_double(key, value);
    else if (key == "batch_size") cfg.batch_size = to_int(key, value);
    else if (key == "scales") cfg.scales = to_double_list(key, value);
    else if (key == "alpha") cfg.alpha = to_double(key, value);
    else if (key == "iterations") cfg.iterations = to_int(key, value);
    else if (key == "seed") cfg.seed = to_u64(key, value);
    else if (key == "base_size") cfg.model.input_size = to_int(key, value);
    else if (key == "width_multiplier") cfg.model.width_multiplier = to_double(key, value);
    else if (key == "classes") cfg.model.num_classes = to_int(key, value);
    else if (key == "attention_hidden") cfg.model.attention_hidden = to_int(key, value);
    else if (key == "capsule_coarse") cfg.model.capsule_coarse = to_int(key, value);
    else if (key == "capsule_mid") cfg.model.capsule_mid = to_int(key, value);
    else if (key == "orientation") cfg.model.orientation = orientation_from_string(value);
    else if (key == "anchor_scale_min") cfg.model.anchor_scale_min = to_double(key, value);
    else if (key == "anchor_scale_max") cfg.model.anchor_scale_max = to_double(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        const std::string where = path.string() + ": line " + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError("config: " + where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ConfigError("config: " + where + ": expected 'key = value'");
        try {
            apply_config_entry(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config: " + where + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

std::string render_config(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "learning_rate = " << fmt(cfg.learning_rate) << "\n";
    os << "momentum = " << fmt(cfg.momentum) << "\n";
    os << "weight_decay = " << fmt(cfg.weight_decay) << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "scales = ";
    for (std::size_t i = 0; i < cfg.scales.size(); ++i) os << (i ? "," : "") << fmt(cfg.scales[i]);
    os << "\n";
    os << "alpha = " << fmt(cfg.alpha) << "\n";
    os << "iterations = " << cfg.iterations << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "base_size = " << cfg.model.input_size << "\n";
    os << "width_multiplier = " << fmt(cfg.model.width_multiplier) << "\n";
    os << "classes = " << cfg.model.num_classes << "\n";
    os << "attention_hidden = " << cfg.model.attention_hidden << "\n";
    os << "capsule_coarse = " << cfg.model.capsule_coarse << "\n";
    os << "capsule_mid = " << cfg.model.capsule_mid << "\n";
    os << "orientation = " << to_string(cfg.model.orientation) << "\n";
    os << "anchor_scale_min = " << fmt(cfg.model.anchor_scale_min) << "\n";
    os << "anchor_scale_max = " << fmt(cfg.model.anchor_scale_max) << "\n";
    return os.str();
}

}  // namespace vssa
