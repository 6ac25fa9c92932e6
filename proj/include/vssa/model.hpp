#pragma once

#include "vssa/detection.hpp"
#include "vssa/mrfeature.hpp"
#include "vssa/vssa_head.hpp"

namespace vssa {

enum class HeadOrientation { Vertical, Horizontal, None };

inline const char* to_string(HeadOrientation o) {
    switch (o) {
        case HeadOrientation::Vertical: return "vertical";
        case HeadOrientation::Horizontal: return "horizontal";
        case HeadOrientation::None: return "none";
    }
    return "?";
}

inline HeadOrientation orientation_from_string(const std::string& s) {
    if (s == "vertical") return HeadOrientation::Vertical;
    if (s == "horizontal") return HeadOrientation::Horizontal;
    if (s == "none") return HeadOrientation::None;
    throw ConfigError("unknown orientation '" + s + "' (expected vertical|horizontal|none)");
}

struct ModelConfig {
    int input_size = 300;  // base size; forward accepts any size >= 64
    double width_multiplier = 1.0;
    int num_classes = 3;
    int attention_hidden = 64;  // LSTM hidden size; attention width matches
    int capsule_coarse = 3;     // stride-64 map
    int capsule_mid = 4;        // stride-32 map
    HeadOrientation orientation = HeadOrientation::Vertical;
    double anchor_scale_min = 0.2;  // fraction of input side
    double anchor_scale_max = 0.95;

    static ModelConfig desk() {
        ModelConfig c;
        c.input_size = 192;
        c.width_multiplier = 0.125;
        c.attention_hidden = 16;
        return c;
    }

    void validate() const {
        if (input_size < 64) throw ConfigError("input_size must be >= 64");
        if (width_multiplier <= 0) throw ConfigError("width_multiplier must be positive");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (attention_hidden < 1) throw ConfigError("attention_hidden must be >= 1");
        if (capsule_coarse < 1 || capsule_mid < 1) throw ConfigError("capsule sizes must be >= 1");
        if (!(anchor_scale_min > 0) || !(anchor_scale_max > anchor_scale_min)) {
            throw ConfigError("anchor scales must satisfy 0 < min < max");
        }
    }
};

template <class T>
struct ModelOutput {
    Tensor<T> class_logits;  // [R, C+1]
    Tensor<T> box_deltas;    // [R, 4]
    std::vector<std::pair<int, int>> pyramid_hw;
};

// The detector: feature pyramid plus one head per level. The stride-16 map
// always uses a plain 3x3 conv head; the stride-32/64 maps use the sequence
// heads unless orientation is None (the fusion-only baseline).
template <class T>
class DetectorModel {
public:
    explicit DetectorModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        features_ = std::make_unique<MrFeatureNet<T>>(params_, cfg_.width_multiplier, rng);
        const int d = cfg_.num_classes + 5;
        const int head_ch = kAnchorsPerCell * d;
        head16_ = std::make_unique<Conv2dLayer<T>>(params_, "head16", features_->channels16(), head_ch, 3, 1, rng);
        if (cfg_.orientation == HeadOrientation::None) {
            conv_head32_ =
                std::make_unique<Conv2dLayer<T>>(params_, "head32", features_->channels32(), head_ch, 3, 1, rng);
            conv_head64_ =
                std::make_unique<Conv2dLayer<T>>(params_, "head64", features_->channels64(), head_ch, 3, 1, rng);
        } else {
            const auto orient = cfg_.orientation == HeadOrientation::Vertical ? ops::Orientation::Vertical
                                                                              : ops::Orientation::Horizontal;
            seq_head32_ = std::make_unique<VssaHead<T>>(params_, "head32", features_->channels32(),
                                                        cfg_.attention_hidden, cfg_.capsule_mid, kAnchorsPerCell,
                                                        cfg_.num_classes, orient, rng);
            seq_head64_ = std::make_unique<VssaHead<T>>(params_, "head64", features_->channels64(),
                                                        cfg_.attention_hidden, cfg_.capsule_coarse, kAnchorsPerCell,
                                                        cfg_.num_classes, orient, rng);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    MrFeatureNet<T>& features() { return *features_; }

    static std::vector<std::pair<int, int>> pyramid_sizes(int input_size) {
        return {{stride_map_size(input_size, 16), stride_map_size(input_size, 16)},
                {stride_map_size(input_size, 32), stride_map_size(input_size, 32)},
                {stride_map_size(input_size, 64), stride_map_size(input_size, 64)}};
    }

    std::vector<Anchor> anchors(int input_size) const {
        return generate_anchors(pyramid_sizes(input_size), input_size, cfg_.anchor_scale_min, cfg_.anchor_scale_max);
    }

    // image: [1, 3, S, S], already normalized.
    ModelOutput<T> forward(Tape<T>* tp, const Tensor<T>& image) const {
        if (image.dim(0) != 1) {
            throw std::invalid_argument("detector forward handles one image per tape; batch via separate tapes");
        }
        auto pyr = features_->forward(tp, image);
        const int d = cfg_.num_classes + 5;
        auto rows16 = ops::head_rows(tp, head16_->forward(tp, pyr.p16), d);
        Tensor<T> rows32, rows64;
        if (cfg_.orientation == HeadOrientation::None) {
            rows32 = ops::head_rows(tp, conv_head32_->forward(tp, pyr.p32), d);
            rows64 = ops::head_rows(tp, conv_head64_->forward(tp, pyr.p64), d);
        } else {
            rows32 = seq_head32_->forward(tp, pyr.p32);
            rows64 = seq_head64_->forward(tp, pyr.p64);
        }
        auto rows = ops::concat(tp, {rows16, rows32, rows64}, 0);
        ModelOutput<T> out;
        out.class_logits = ops::slice(tp, rows, 1, 0, cfg_.num_classes + 1);
        out.box_deltas = ops::slice(tp, rows, 1, cfg_.num_classes + 1, 4);
        out.pyramid_hw = pyr.sizes();
        return out;
    }

    // Test hook: per-decode-step attention weights on the coarse map.
    std::vector<Tensor<T>> coarse_attention_weights(const Tensor<T>& map) const {
        if (!seq_head64_) throw std::logic_error("attention weights requested from a plain-conv model");
        return seq_head64_->attention_weights(map);
    }

    VssaHead<T>* sequence_head32() { return seq_head32_.get(); }
    VssaHead<T>* sequence_head64() { return seq_head64_.get(); }

private:
    ModelConfig cfg_;
    ParamStore<T> params_;
    std::unique_ptr<MrFeatureNet<T>> features_;
    std::unique_ptr<Conv2dLayer<T>> head16_;
    std::unique_ptr<Conv2dLayer<T>> conv_head32_;
    std::unique_ptr<Conv2dLayer<T>> conv_head64_;
    std::unique_ptr<VssaHead<T>> seq_head32_;
    std::unique_ptr<VssaHead<T>> seq_head64_;
};

}  // namespace vssa
