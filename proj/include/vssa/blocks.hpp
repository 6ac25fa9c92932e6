#pragma once

#include <deque>
#include <string>

#include "vssa/ops.hpp"
#include "vssa/rng.hpp"
#include "vssa/tensor.hpp"

namespace vssa {

template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    bool decay;          // weight decay applies (conv/matmul weights only)
    Tensor<T> velocity;  // lazily created by the optimizer
};

// Owns every learnable tensor of a model in registration order. Blocks keep
// references into the store; the deque keeps them stable.
template <class T>
class ParamStore {
public:
    Param<T>& add(std::string name, Tensor<T> value, bool decay) {
        for (const auto& p : params_) {
            if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
        }
        params_.push_back(Param<T>{std::move(name), std::move(value), decay, Tensor<T>()});
        return params_.back();
    }

    std::deque<Param<T>>& all() { return params_; }
    const std::deque<Param<T>>& all() const { return params_; }

    Param<T>* find(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    // Registers every parameter on the tape so backward() accumulates into it.
    void bind(Tape<T>& tape) {
        for (auto& p : params_) p.value = tape.leaf(p.value);
    }

    // Replaces parameter values (registration order) with in[offset...]. Used
    // by the gradient-check harness, which registers leaves itself.
    void assign(const std::vector<Tensor<T>>& in, std::size_t offset) {
        if (in.size() != offset + params_.size()) {
            throw std::invalid_argument("ParamStore::assign: expected " + std::to_string(params_.size()) +
                                        " tensors, got " + std::to_string(in.size() - offset));
        }
        std::size_t i = offset;
        for (auto& p : params_) {
            if (in[i].shape != p.value.shape) {
                throw std::invalid_argument("ParamStore::assign: shape mismatch for " + p.name);
            }
            p.value = in[i++];
        }
    }

private:
    std::deque<Param<T>> params_;
};

template <class T>
Tensor<T> glorot_uniform(const Shape& shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = static_cast<T>(rng.uniform(-a, a));
    return t;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
class Conv2dLayer {
public:
    Conv2dLayer(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int k, int stride, Rng& rng,
                ops::Padding padding = ops::Padding::Same)
        : stride_(stride),
          padding_(padding),
          w_(ps.add(name + ".w",
                    glorot_uniform<T>({out_ch, in_ch, k, k}, static_cast<std::int64_t>(in_ch) * k * k,
                                      static_cast<std::int64_t>(out_ch) * k * k, rng),
                    true)),
          b_(ps.add(name + ".b", Tensor<T>::zeros({out_ch}), false)) {}

    Tensor<T> forward(Tape<T>* tp, const Tensor<T>& x) const {
        return ops::conv2d(tp, x, w_.value, b_.value, stride_, padding_);
    }

private:
    int stride_;
    ops::Padding padding_;
    Param<T>& w_;
    Param<T>& b_;
};

// Depthwise 3x3 (stride s) -> pointwise 1x1 -> per-channel scale/bias -> ReLU.
// The affine pair stands in for the usual feature normalization.
template <class T>
class SeparableBlock {
public:
    SeparableBlock(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng)
        : stride_(stride),
          dw_(ps.add(name + ".dw", glorot_uniform<T>({in_ch, 1, 3, 3}, 9, 9, rng), true)),
          pw_(ps.add(name + ".pw", glorot_uniform<T>({out_ch, in_ch, 1, 1}, in_ch, out_ch, rng), true)),
          scale_(ps.add(name + ".scale", Tensor<T>::full({out_ch}, T(1)), false)),
          bias_(ps.add(name + ".bias", Tensor<T>::zeros({out_ch}), false)) {}

    Tensor<T> forward(Tape<T>* tp, const Tensor<T>& x) const {
        auto y = ops::depthwise_conv2d(tp, x, dw_.value, stride_);
        y = ops::conv2d(tp, y, pw_.value, Tensor<T>(), 1, ops::Padding::Same);
        y = ops::channel_affine(tp, y, scale_.value, bias_.value);
        return ops::relu(tp, y);
    }

private:
    int stride_;
    Param<T>& dw_;
    Param<T>& pw_;
    Param<T>& scale_;
    Param<T>& bias_;
};

template <class T>
class DeconvLayer {
public:
    DeconvLayer(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, Rng& rng)
        : w_(ps.add(name + ".w",
                    glorot_uniform<T>({in_ch, out_ch, 3, 3}, static_cast<std::int64_t>(in_ch) * 9,
                                      static_cast<std::int64_t>(out_ch) * 9, rng),
                    true)) {}

    Tensor<T> forward(Tape<T>* tp, const Tensor<T>& x, int target_h, int target_w) const {
        return ops::transposed_conv2d(tp, x, w_.value, 2, target_h, target_w);
    }

private:
    Param<T>& w_;
};

// ---------------------------------------------------------------------------
// Recurrent cells (batched over independent lanes)
// ---------------------------------------------------------------------------

template <class T>
struct LstmState {
    Tensor<T> h;
    Tensor<T> c;
};

// Fused-gate LSTM. Gate slab order: input, forget, cell, output. Forget-gate
// bias starts at 1 so early training does not flush the cell state.
template <class T>
class LstmCell {
public:
    LstmCell(ParamStore<T>& ps, const std::string& name, int input_size, int hidden, Rng& rng)
        : input_size_(input_size),
          hidden_(hidden),
          wx_(ps.add(name + ".wx", glorot_uniform<T>({4 * hidden, input_size}, input_size, hidden, rng), true)),
          wh_(ps.add(name + ".wh", glorot_uniform<T>({4 * hidden, hidden}, hidden, hidden, rng), true)),
          b_(ps.add(name + ".b", Tensor<T>::zeros({4 * hidden}), false)) {
        for (int i = hidden; i < 2 * hidden; ++i) b_.value.ptr()[i] = T(1);
    }

    int hidden_size() const { return hidden_; }
    int input_size() const { return input_size_; }

    LstmState<T> initial_state(int lanes) const {
        return {Tensor<T>::zeros({lanes, hidden_}), Tensor<T>::zeros({lanes, hidden_})};
    }

    // x: [lanes, input_size]
    LstmState<T> step(Tape<T>* tp, const Tensor<T>& x, const LstmState<T>& prev) const {
        auto gates = ops::add(tp, ops::matmul_nt(tp, x, wx_.value), ops::matmul_nt(tp, prev.h, wh_.value));
        gates = ops::add_rowvec(tp, gates, b_.value);
        auto gi = ops::sigmoid(tp, ops::slice(tp, gates, 1, 0, hidden_));
        auto gf = ops::sigmoid(tp, ops::slice(tp, gates, 1, hidden_, hidden_));
        auto gc = ops::tanh_op(tp, ops::slice(tp, gates, 1, 2 * hidden_, hidden_));
        auto go = ops::sigmoid(tp, ops::slice(tp, gates, 1, 3 * hidden_, hidden_));
        auto c = ops::add(tp, ops::mul(tp, gf, prev.c), ops::mul(tp, gi, gc));
        auto h = ops::mul(tp, go, ops::tanh_op(tp, c));
        return {h, c};
    }

private:
    int input_size_;
    int hidden_;
    Param<T>& wx_;
    Param<T>& wh_;
    Param<T>& b_;
};

// Additive attention over an encoded sequence: score_t = v . tanh(We h_t +
// Wd d), weights = softmax over t, readout = weighted sum of h_t.
template <class T>
class AttentionCell {
public:
    AttentionCell(ParamStore<T>& ps, const std::string& name, int hidden, int att_width, Rng& rng)
        : hidden_(hidden),
          att_width_(att_width),
          w_enc_(ps.add(name + ".we", glorot_uniform<T>({att_width, hidden}, hidden, att_width, rng), true)),
          w_dec_(ps.add(name + ".wd", glorot_uniform<T>({att_width, hidden}, hidden, att_width, rng), true)),
          v_(ps.add(name + ".v", glorot_uniform<T>({1, att_width}, att_width, 1, rng), true)) {}

    // enc: [lanes, steps, hidden], dec: [lanes, hidden] -> [lanes, hidden]
    Tensor<T> read(Tape<T>* tp, const Tensor<T>& enc, const Tensor<T>& dec) const {
        const int lanes = enc.dim(0), steps = enc.dim(1);
        if (enc.dim(2) != hidden_ || dec.dim(0) != lanes || dec.dim(1) != hidden_) {
            throw std::invalid_argument("attention: enc " + shape_str(enc.shape) + " / dec " + shape_str(dec.shape) +
                                        " inconsistent with hidden " + std::to_string(hidden_));
        }
        auto enc_flat = ops::reshape(enc, {lanes * steps, hidden_});
        auto u = ops::matmul_nt(tp, enc_flat, w_enc_.value);  // [lanes*steps, att]
        auto d = ops::matmul_nt(tp, dec, w_dec_.value);       // [lanes, att]
        std::vector<int> repeat(static_cast<std::size_t>(lanes) * steps);
        for (int l = 0; l < lanes; ++l)
            for (int s = 0; s < steps; ++s) repeat[static_cast<std::size_t>(l) * steps + s] = l;
        auto d_tiled = ops::take_rows(tp, d, repeat);
        auto scores = ops::matmul_nt(tp, ops::tanh_op(tp, ops::add(tp, u, d_tiled)), v_.value);  // [lanes*steps, 1]
        auto weights = ops::softmax(tp, ops::reshape(scores, {lanes, steps}), 1);
        auto scaled = ops::scale_rows(tp, enc_flat, ops::reshape(weights, {lanes * steps}));
        auto cube = ops::reshape(scaled, {lanes, steps, hidden_});
        Tensor<T> out;
        for (int s = 0; s < steps; ++s) {
            auto piece = ops::reshape(ops::slice(tp, cube, 1, s, 1), {lanes, hidden_});
            out = out.defined() ? ops::add(tp, out, piece) : piece;
        }
        return out;
    }

    // Attention weights only (forward, no tape): [lanes, steps].
    Tensor<T> weights(const Tensor<T>& enc, const Tensor<T>& dec) const {
        const int lanes = enc.dim(0), steps = enc.dim(1);
        auto enc_flat = ops::reshape(enc, {lanes * steps, hidden_});
        auto u = ops::matmul_nt<T>(nullptr, enc_flat, w_enc_.value);
        auto d = ops::matmul_nt<T>(nullptr, dec, w_dec_.value);
        std::vector<int> repeat(static_cast<std::size_t>(lanes) * steps);
        for (int l = 0; l < lanes; ++l)
            for (int s = 0; s < steps; ++s) repeat[static_cast<std::size_t>(l) * steps + s] = l;
        auto d_tiled = ops::take_rows<T>(nullptr, d, repeat);
        auto scores = ops::matmul_nt<T>(nullptr, ops::tanh_op<T>(nullptr, ops::add<T>(nullptr, u, d_tiled)), v_.value);
        return ops::softmax<T>(nullptr, ops::reshape(scores, {lanes, steps}), 1);
    }

private:
    int hidden_;
    int att_width_;
    Param<T>& w_enc_;
    Param<T>& w_dec_;
    Param<T>& v_;
};

}  // namespace vssa
