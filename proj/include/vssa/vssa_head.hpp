#pragma once

#include "vssa/blocks.hpp"

namespace vssa {

// Sequence-attention detection head. Every spatial location of the feature
// map contributes one capsule: the T channel-vectors ending at that location
// (above it for vertical orientation, to its left for horizontal). An
// encoder LSTM walks the capsule, a decoder initialized with the encoder's
// final state re-walks the encoder outputs, and additive attention over the
// encoder states produces a context vector. The prediction for the location
// is a linear map of [decoder_h_T ; context_T] to A*(C+1+4) outputs.
template <class T>
class VssaHead {
public:
    VssaHead(ParamStore<T>& ps, const std::string& name, int channels, int hidden, int capsule, int anchors,
             int classes, ops::Orientation orient, Rng& rng)
        : channels_(channels),
          hidden_(hidden),
          capsule_(capsule),
          anchors_(anchors),
          classes_(classes),
          orient_(orient),
          encoder_(ps, name + ".enc", channels, hidden, rng),
          decoder_(ps, name + ".dec", hidden, hidden, rng),
          attention_(ps, name + ".att", hidden, hidden, rng),
          head_w_(ps.add(name + ".out.w",
                         glorot_uniform<T>({anchors * (classes + 5), 2 * hidden}, 2 * hidden,
                                           anchors * (classes + 5), rng),
                         true)),
          head_b_(ps.add(name + ".out.b", Tensor<T>::zeros({anchors * (classes + 5)}), false)) {
        if (capsule < 1) throw std::invalid_argument("capsule size must be positive");
    }

    int capsule_size() const { return capsule_; }

    // map: [N, channels, H, W] -> per-anchor rows [N*H*W*A, classes+5] in
    // (n, y, x, anchor) order.
    Tensor<T> forward(Tape<T>* tp, const Tensor<T>& map) const {
        if (map.dim(1) != channels_) {
            throw std::invalid_argument("vssa head: expected " + std::to_string(channels_) + " channels, got " +
                                        shape_str(map.shape));
        }
        auto caps = ops::extract_capsules(tp, map, capsule_, orient_);  // [L, T, C]
        const int lanes = caps.dim(0);
        auto enc = encode(tp, caps, lanes);

        // Decoder starts from the encoder's final state and consumes the
        // encoder outputs in order; only the last step feeds the prediction.
        LstmState<T> dstate{enc.h.back(), enc.c_last};
        Tensor<T> context;
        for (int t = 0; t < capsule_; ++t) {
            dstate = decoder_.step(tp, enc.h[static_cast<std::size_t>(t)], dstate);
            if (t == capsule_ - 1) context = attention_.read(tp, enc.seq, dstate.h);
        }
        auto pred_in = ops::concat(tp, {dstate.h, context}, 1);  // [L, 2H]
        auto rows = ops::add_rowvec(tp, ops::matmul_nt(tp, pred_in, head_w_.value), head_b_.value);
        return ops::reshape(rows, {lanes * anchors_, classes_ + 5});
    }

    // Attention weights of every decode step (forward only), for inspecting
    // normalization: returns [steps][L, T].
    std::vector<Tensor<T>> attention_weights(const Tensor<T>& map) const {
        auto caps = ops::extract_capsules<T>(nullptr, map, capsule_, orient_);
        const int lanes = caps.dim(0);
        auto enc = encode(nullptr, caps, lanes);
        LstmState<T> dstate{enc.h.back(), enc.c_last};
        std::vector<Tensor<T>> out;
        for (int t = 0; t < capsule_; ++t) {
            dstate = decoder_.step(nullptr, enc.h[static_cast<std::size_t>(t)], dstate);
            out.push_back(attention_.weights(enc.seq, dstate.h));
        }
        return out;
    }

private:
    struct Encoded {
        std::vector<Tensor<T>> h;  // h_1..h_T, each [L, H]
        Tensor<T> c_last;
        Tensor<T> seq;  // [L, T, H]
    };

    Encoded encode(Tape<T>* tp, const Tensor<T>& caps, int lanes) const {
        Encoded enc;
        LstmState<T> st = encoder_.initial_state(lanes);
        std::vector<Tensor<T>> stacked;
        for (int t = 0; t < capsule_; ++t) {
            auto xt = ops::reshape(ops::slice(tp, caps, 1, t, 1), {lanes, channels_});
            st = encoder_.step(tp, xt, st);
            enc.h.push_back(st.h);
            stacked.push_back(ops::reshape(st.h, {lanes, 1, hidden_}));
        }
        enc.c_last = st.c;
        enc.seq = ops::concat(tp, stacked, 1);
        return enc;
    }

    int channels_;
    int hidden_;
    int capsule_;
    int anchors_;
    int classes_;
    ops::Orientation orient_;
    LstmCell<T> encoder_;
    LstmCell<T> decoder_;
    AttentionCell<T> attention_;
    Param<T>& head_w_;
    Param<T>& head_b_;
};

}  // namespace vssa
