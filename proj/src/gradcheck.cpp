#include "vssa/gradcheck.hpp"

#include "vssa/blocks.hpp"
#include "vssa/detection.hpp"
#include "vssa/model.hpp"
#include "vssa/ops.hpp"
#include "vssa/rng.hpp"

namespace vssa {
namespace {

using D = double;
using ops::Orientation;
using ops::Padding;

Tensor<D> fill_uniform(const Shape& s, Rng& rng, double lo, double hi) {
    Tensor<D> t = Tensor<D>::zeros(s);
    for (std::int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = rng.uniform(lo, hi);
    return t;
}

// Keeps values away from a kink so central differences stay valid there.
Tensor<D> fill_away_from(const Shape& s, Rng& rng, double lo, double hi, double kink, double margin) {
    Tensor<D> t = fill_uniform(s, rng, lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        double& v = t.ptr()[i];
        if (std::abs(std::abs(v) - kink) < margin) v += (v >= 0 ? 2 : -2) * margin;
    }
    return t;
}

Tensor<D> sq_loss(Tape<D>* tp, const Tensor<D>& y) { return ops::sum_all(tp, ops::mul(tp, y, y)); }

GradCheckReport run(const GradCheckLoss<D>& f, std::vector<Tensor<D>> inputs) {
    return check_gradients<D>(f, std::move(inputs), gradcheck_opts64());
}

GradCheckReport run_sampled(const GradCheckLoss<D>& f, std::vector<Tensor<D>> inputs, std::int64_t coords) {
    auto opt = gradcheck_opts64();
    opt.max_coords_per_input = coords;
    return check_gradients<D>(f, std::move(inputs), opt);
}

// Deep composites stack many ReLUs, so at the default step some probe
// interval straddles a kink and the central difference averages the two
// slopes. A smaller step keeps the probes one-sided; 64-bit arithmetic
// leaves plenty of headroom above roundoff at 1e-7.
GradCheckReport run_sampled_eps(const GradCheckLoss<D>& f, std::vector<Tensor<D>> inputs, std::int64_t coords,
                                double eps) {
    auto opt = gradcheck_opts64();
    opt.max_coords_per_input = coords;
    opt.eps = eps;
    return check_gradients<D>(f, std::move(inputs), opt);
}

std::vector<Tensor<D>> with_params(const Tensor<D>& x, ParamStore<D>& ps) {
    std::vector<Tensor<D>> inputs = {x};
    for (auto& p : ps.all()) inputs.push_back(p.value);
    return inputs;
}

std::vector<NamedGradCheck> build_registry() {
    std::vector<NamedGradCheck> checks;

    checks.push_back({"conv2d_same_stride2_bias", [] {
        Rng rng(101);
        auto x = fill_uniform({1, 3, 7, 7}, rng, -1, 1);
        auto w = fill_uniform({4, 3, 3, 3}, rng, -1, 1);
        auto b = fill_uniform({4}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::conv2d(tp, in[0], in[1], in[2], 2, Padding::Same));
        }, {x, w, b});
    }});

    checks.push_back({"conv2d_1x1", [] {
        Rng rng(102);
        auto x = fill_uniform({2, 5, 4, 4}, rng, -1, 1);
        auto w = fill_uniform({6, 5, 1, 1}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::conv2d(tp, in[0], in[1], Tensor<D>(), 1, Padding::Same));
        }, {x, w});
    }});

    checks.push_back({"conv2d_valid", [] {
        Rng rng(103);
        auto x = fill_uniform({1, 2, 5, 5}, rng, -1, 1);
        auto w = fill_uniform({3, 2, 3, 3}, rng, -1, 1);
        auto b = fill_uniform({3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::conv2d(tp, in[0], in[1], in[2], 1, Padding::Valid));
        }, {x, w, b});
    }});

    checks.push_back({"depthwise_conv2d_stride2", [] {
        Rng rng(104);
        auto x = fill_uniform({1, 4, 7, 7}, rng, -1, 1);
        auto w = fill_uniform({4, 1, 3, 3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::depthwise_conv2d(tp, in[0], in[1], 2));
        }, {x, w});
    }});

    checks.push_back({"transposed_conv2d_5_to_10", [] {
        Rng rng(105);
        auto x = fill_uniform({1, 3, 5, 5}, rng, -1, 1);
        auto w = fill_uniform({3, 2, 3, 3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::transposed_conv2d(tp, in[0], in[1], 2, 10, 10));
        }, {x, w});
    }});

    checks.push_back({"transposed_conv2d_5_to_9", [] {
        Rng rng(106);
        auto x = fill_uniform({1, 2, 5, 5}, rng, -1, 1);
        auto w = fill_uniform({2, 3, 3, 3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::transposed_conv2d(tp, in[0], in[1], 2, 9, 9));
        }, {x, w});
    }});

    checks.push_back({"matmul", [] {
        Rng rng(107);
        auto a = fill_uniform({4, 6}, rng, -1, 1);
        auto b = fill_uniform({6, 5}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::matmul(tp, in[0], in[1]));
        }, {a, b});
    }});

    checks.push_back({"matmul_nt", [] {
        Rng rng(108);
        auto a = fill_uniform({4, 6}, rng, -1, 1);
        auto b = fill_uniform({5, 6}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::matmul_nt(tp, in[0], in[1]));
        }, {a, b});
    }});

    checks.push_back({"add_rowvec_scale_rows", [] {
        Rng rng(109);
        auto x = fill_uniform({5, 4}, rng, -1, 1);
        auto b = fill_uniform({4}, rng, -1, 1);
        auto s = fill_uniform({5}, rng, 0.5, 2.0);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::scale_rows(tp, ops::add_rowvec(tp, in[0], in[1]), in[2]));
        }, {x, b, s});
    }});

    checks.push_back({"relu", [] {
        Rng rng(110);
        auto x = fill_away_from({3, 4, 5}, rng, -1, 1, 0.0, 0.05);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::relu(tp, in[0]));
        }, {x});
    }});

    checks.push_back({"sigmoid_tanh", [] {
        Rng rng(111);
        auto x = fill_uniform({3, 7}, rng, -2, 2);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            auto s = ops::sigmoid(tp, in[0]);
            auto t = ops::tanh_op(tp, in[0]);
            return sq_loss(tp, ops::mul(tp, s, t));
        }, {x});
    }});

    checks.push_back({"softmax_middle_axis", [] {
        Rng rng(112);
        auto x = fill_uniform({2, 5, 3}, rng, -3, 3);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::softmax(tp, in[0], 1));
        }, {x});
    }});

    checks.push_back({"softmax_last_axis", [] {
        Rng rng(113);
        auto x = fill_uniform({4, 6}, rng, -3, 3);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::softmax(tp, in[0], 1));
        }, {x});
    }});

    checks.push_back({"l2_normalize_scale", [] {
        Rng rng(114);
        auto x = fill_uniform({2, 5, 3, 3}, rng, -1, 1);
        auto g = fill_uniform({5}, rng, 0.5, 2.0);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::l2_normalize_scale(tp, in[0], in[1]));
        }, {x, g});
    }});

    checks.push_back({"channel_affine", [] {
        Rng rng(115);
        auto x = fill_uniform({2, 4, 3, 3}, rng, -1, 1);
        auto s = fill_uniform({4}, rng, 0.5, 2.0);
        auto b = fill_uniform({4}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::channel_affine(tp, in[0], in[1], in[2]));
        }, {x, s, b});
    }});

    checks.push_back({"concat_slice", [] {
        Rng rng(116);
        auto a = fill_uniform({2, 3, 2, 2}, rng, -1, 1);
        auto b = fill_uniform({2, 2, 2, 2}, rng, -1, 1);
        auto c = fill_uniform({2, 4, 2, 2}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            auto cat = ops::concat(tp, {in[0], in[1], in[2]}, 1);
            auto mid = ops::slice(tp, cat, 1, 2, 5);
            return sq_loss(tp, mid);
        }, {a, b, c});
    }});

    checks.push_back({"take_rows_repeated", [] {
        Rng rng(117);
        auto x = fill_uniform({5, 3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            auto y = ops::take_rows(tp, in[0], {0, 2, 2, 4, 1});
            return sq_loss(tp, y);
        }, {x});
    }});

    checks.push_back({"extract_capsules_vertical", [] {
        Rng rng(118);
        auto x = fill_uniform({1, 3, 4, 4}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            auto caps = ops::extract_capsules(tp, in[0], 3, Orientation::Vertical);
            return sq_loss(tp, caps);
        }, {x});
    }});

    checks.push_back({"extract_capsules_horizontal", [] {
        Rng rng(119);
        auto x = fill_uniform({1, 3, 4, 4}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            auto caps = ops::extract_capsules(tp, in[0], 4, Orientation::Horizontal);
            return sq_loss(tp, caps);
        }, {x});
    }});

    checks.push_back({"head_rows", [] {
        Rng rng(120);
        auto x = fill_uniform({2, 10, 3, 3}, rng, -1, 1);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return sq_loss(tp, ops::head_rows(tp, in[0], 5));
        }, {x});
    }});

    checks.push_back({"softmax_cross_entropy", [] {
        Rng rng(121);
        auto logits = fill_uniform({6, 4}, rng, -2, 2);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            std::vector<int> labels = {0, 3, 1, 1, 2, 0};
            auto ce = ops::softmax_cross_entropy(tp, in[0], labels);
            return ops::sum_all(tp, ce);
        }, {logits});
    }});

    checks.push_back({"smooth_l1", [] {
        Rng rng(122);
        auto x = fill_away_from({4, 4}, rng, -2, 2, 1.0, 0.05);
        return run([](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            return ops::sum_all(tp, ops::smooth_l1(tp, in[0]));
        }, {x});
    }});

    checks.push_back({"separable_block", [] {
        Rng rng(123);
        ParamStore<D> ps;
        SeparableBlock<D> blk(ps, "blk", 3, 5, 2, rng);
        auto x = fill_uniform({1, 3, 6, 6}, rng, -1, 1);
        return run([&blk, &ps](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            ps.assign(in, 1);
            return sq_loss(tp, blk.forward(tp, in[0]));
        }, with_params(x, ps));
    }});

    checks.push_back({"lstm_cell_sequence", [] {
        Rng rng(124);
        ParamStore<D> ps;
        LstmCell<D> cell(ps, "lstm", 4, 5, rng);
        auto x = fill_uniform({3, 3, 4}, rng, -1, 1);  // [lanes, steps, in]
        return run([&cell, &ps](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            ps.assign(in, 1);
            const int lanes = in[0].dim(0), steps = in[0].dim(1);
            LstmState<D> st = cell.initial_state(lanes);
            Tensor<D> acc;
            for (int t = 0; t < steps; ++t) {
                auto xt = ops::reshape(ops::slice(tp, in[0], 1, t, 1), {lanes, in[0].dim(2)});
                st = cell.step(tp, xt, st);
                acc = acc.defined() ? ops::add(tp, acc, st.h) : st.h;
            }
            return sq_loss(tp, acc);
        }, with_params(x, ps));
    }});

    checks.push_back({"attention_readout", [] {
        Rng rng(125);
        ParamStore<D> ps;
        AttentionCell<D> att(ps, "att", 5, 6, rng);
        auto enc = fill_uniform({2, 4, 5}, rng, -1, 1);  // [lanes, steps, hidden]
        auto dec = fill_uniform({2, 5}, rng, -1, 1);
        return run([&att, &ps](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            ps.assign(in, 2);
            auto ctx = att.read(tp, in[0], in[1]);
            return sq_loss(tp, ctx);
        }, [&] {
            std::vector<Tensor<D>> v = {enc, dec};
            for (auto& p : ps.all()) v.push_back(p.value);
            return v;
        }());
    }});

    checks.push_back({"vssa_head_tiny", [] {
        Rng rng(126);
        ParamStore<D> ps;
        VssaHead<D> head(ps, "head", /*channels=*/4, /*hidden=*/8, /*capsule=*/3, /*anchors=*/2,
                         /*classes=*/2, Orientation::Vertical, rng);
        auto x = fill_uniform({1, 4, 3, 3}, rng, -1, 1);
        return run_sampled([&head, &ps](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            ps.assign(in, 1);
            return sq_loss(tp, head.forward(tp, in[0]));
        }, with_params(x, ps), 40);
    }});

    checks.push_back({"detection_loss_tiny_model", [] {
        Rng rng(127);
        ModelConfig cfg = ModelConfig::desk();
        cfg.input_size = 64;
        cfg.width_multiplier = 0.0625;
        cfg.num_classes = 2;
        cfg.attention_hidden = 4;
        cfg.orientation = HeadOrientation::Vertical;
        DetectorModel<D> model(cfg, 128);
        auto anchors = model.anchors(cfg.input_size);
        std::vector<GtBox> gts = {{6.0, 10.0, 30.0, 34.0, 1}};
        auto img = fill_uniform({1, 3, cfg.input_size, cfg.input_size}, rng, -1, 1);
        // Freeze matching and hard-negative selection at the unperturbed
        // point: both are piecewise constant, and letting the mined set flip
        // under the probe offsets would corrupt the finite differences.
        auto match = match_anchors(anchors, gts, cfg.input_size);
        auto base = model.forward(nullptr, img);
        auto negs = mine_hard_negatives(base.class_logits, match);
        return run_sampled_eps([&model, &match, &negs](Tape<D>* tp, std::vector<Tensor<D>>& in) {
            model.params().assign(in, 1);
            auto out = model.forward(tp, in[0]);
            return detection_loss_mined(tp, out.class_logits, out.box_deltas, match, negs, 0.1);
        }, with_params(img, model.params()), 6, 1e-7);
    }});

    return checks;
}

}  // namespace

const std::vector<NamedGradCheck>& standard_grad_checks() {
    static const std::vector<NamedGradCheck> registry = build_registry();
    return registry;
}

}  // namespace vssa
