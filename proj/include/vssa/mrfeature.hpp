#pragma once

#include <memory>

#include "vssa/blocks.hpp"

namespace vssa {

// Channel count after applying the width multiplier; floor of 8 keeps tiny
// desk models functional.
inline int scaled_channels(int base, double width) {
    return std::max(8, static_cast<int>(std::lround(base * width)));
}

inline int stride_map_size(int input, int stride) { return (input + stride - 1) / stride; }

template <class T>
struct BackboneStages {
    Tensor<T> s8;   // stride 8
    Tensor<T> s16;  // stride 16
    Tensor<T> s32;  // stride 32
    Tensor<T> s64;  // stride 64
};

template <class T>
struct FeaturePyramid {
    // Fine to coarse: strides 16, 32, 64.
    Tensor<T> p16;
    Tensor<T> p32;
    Tensor<T> p64;

    std::vector<std::pair<int, int>> sizes() const {
        return {{p16.dim(2), p16.dim(3)}, {p32.dim(2), p32.dim(3)}, {p64.dim(2), p64.dim(3)}};
    }
};

// Depthwise-separable backbone (six stride-2 stages: the stem plus blocks
// 2, 4, 6, 12 and 13) feeding a conv-deconv fusion that yields three maps at
// strides 16/32/64. Fully convolutional: one parameter set serves every
// input size >= 64.
template <class T>
class MrFeatureNet {
public:
    MrFeatureNet(ParamStore<T>& ps, double width, Rng& rng)
        : width_(width),
          stem_w_(ps.add("stem.w",
                         glorot_uniform<T>({scaled_channels(32, width), 3, 3, 3}, 27,
                                           static_cast<std::int64_t>(scaled_channels(32, width)) * 9, rng),
                         true)),
          stem_scale_(ps.add("stem.scale", Tensor<T>::full({scaled_channels(32, width)}, T(1)), false)),
          stem_bias_(ps.add("stem.bias", Tensor<T>::zeros({scaled_channels(32, width)}), false)) {
        struct Row {
            int out;
            int stride;
        };
        // Depthwise-separable rows; strides reach 64 at the last block.
        const Row rows[13] = {{64, 1},  {128, 2}, {128, 1}, {256, 2},  {256, 1},  {512, 2}, {512, 1},
                              {512, 1}, {512, 1}, {512, 1}, {512, 1},  {1024, 2}, {1024, 2}};
        int in_ch = scaled_channels(32, width);
        for (int i = 0; i < 13; ++i) {
            const int out_ch = scaled_channels(rows[i].out, width);
            blocks_.push_back(std::make_unique<SeparableBlock<T>>(ps, "ds" + std::to_string(i + 1), in_ch, out_ch,
                                                                  rows[i].stride, rng));
            in_ch = out_ch;
        }
        const int c512 = scaled_channels(512, width);
        const int c256 = scaled_channels(256, width);
        const int c1024 = scaled_channels(1024, width);
        fuse1_deconv_ = std::make_unique<DeconvLayer<T>>(ps, "fuse1.deconv", c1024, c512, rng);
        fuse1_gamma_ = &ps.add("fuse1.gamma", Tensor<T>::full({c1024 + c512}, T(20)), false);
        fuse1_proj_ = std::make_unique<Conv2dLayer<T>>(ps, "fuse1.proj", c1024 + c512, c512, 1, 1, rng);
        fuse2_deconv_ = std::make_unique<DeconvLayer<T>>(ps, "fuse2.deconv", c512, c256, rng);
        fuse2_chain_a_ = std::make_unique<DeconvLayer<T>>(ps, "fuse2.chain_a", c1024, c256, rng);
        fuse2_chain_b_ = std::make_unique<DeconvLayer<T>>(ps, "fuse2.chain_b", c256, c256, rng);
        fuse2_gamma_ = &ps.add("fuse2.gamma", Tensor<T>::full({c512 + 2 * c256}, T(20)), false);
        fuse2_proj_ = std::make_unique<Conv2dLayer<T>>(ps, "fuse2.proj", c512 + 2 * c256, c512, 1, 1, rng);
    }

    int channels16() const { return scaled_channels(512, width_); }
    int channels32() const { return scaled_channels(512, width_); }
    int channels64() const { return scaled_channels(1024, width_); }

    BackboneStages<T> backbone(Tape<T>* tp, const Tensor<T>& image) const {
        if (image.rank() != 4 || image.dim(1) != 3) {
            throw std::invalid_argument("backbone: expected [N,3,H,W] input, got " + shape_str(image.shape));
        }
        if (image.dim(2) < 64 || image.dim(3) < 64) {
            throw std::invalid_argument("backbone: input " + shape_str(image.shape) +
                                        " too small for a stride-64 stage (minimum 64)");
        }
        auto x = ops::conv2d(tp, image, stem_w_.value, Tensor<T>(), 2, ops::Padding::Same);
        x = ops::relu(tp, ops::channel_affine(tp, x, stem_scale_.value, stem_bias_.value));
        BackboneStages<T> st;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i]->forward(tp, x);
            if (i == 4) st.s8 = x;    // ds5
            if (i == 10) st.s16 = x;  // ds11
            if (i == 11) st.s32 = x;  // ds12
            if (i == 12) st.s64 = x;  // ds13
        }
        return st;
    }

    // Concat the stride-32 skip with the upsampled stride-64 map, then
    // normalize/scale, project and rectify.
    Tensor<T> build_fused32(Tape<T>* tp, const BackboneStages<T>& st) const {
        auto up = fuse1_deconv_->forward(tp, st.s64, st.s32.dim(2), st.s32.dim(3));
        auto cat = ops::concat(tp, {st.s32, up}, 1);
        auto norm = ops::l2_normalize_scale(tp, cat, fuse1_gamma_->value);
        return ops::relu(tp, fuse1_proj_->forward(tp, norm));
    }

    // Concat the stride-16 skip, the upsampled fused-32 map, and a chained
    // double upsampling of the stride-64 map.
    Tensor<T> build_fused16(Tape<T>* tp, const BackboneStages<T>& st, const Tensor<T>& fused32) const {
        auto up1 = fuse2_deconv_->forward(tp, fused32, st.s16.dim(2), st.s16.dim(3));
        auto chain = fuse2_chain_a_->forward(tp, st.s64, st.s32.dim(2), st.s32.dim(3));
        chain = fuse2_chain_b_->forward(tp, chain, st.s16.dim(2), st.s16.dim(3));
        auto cat = ops::concat(tp, {st.s16, up1, chain}, 1);
        auto norm = ops::l2_normalize_scale(tp, cat, fuse2_gamma_->value);
        return ops::relu(tp, fuse2_proj_->forward(tp, norm));
    }

    FeaturePyramid<T> forward(Tape<T>* tp, const Tensor<T>& image) const {
        auto st = backbone(tp, image);
        FeaturePyramid<T> pyr;
        pyr.p64 = st.s64;
        pyr.p32 = build_fused32(tp, st);
        pyr.p16 = build_fused16(tp, st, pyr.p32);
        return pyr;
    }

private:
    double width_;
    Param<T>& stem_w_;
    Param<T>& stem_scale_;
    Param<T>& stem_bias_;
    std::vector<std::unique_ptr<SeparableBlock<T>>> blocks_;
    std::unique_ptr<DeconvLayer<T>> fuse1_deconv_;
    Param<T>* fuse1_gamma_;
    std::unique_ptr<Conv2dLayer<T>> fuse1_proj_;
    std::unique_ptr<DeconvLayer<T>> fuse2_deconv_;
    std::unique_ptr<DeconvLayer<T>> fuse2_chain_a_;
    std::unique_ptr<DeconvLayer<T>> fuse2_chain_b_;
    Param<T>* fuse2_gamma_;
    std::unique_ptr<Conv2dLayer<T>> fuse2_proj_;
};

}  // namespace vssa
