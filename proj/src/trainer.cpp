#include "vssa/trainer.hpp"

#include <cmath>
#include <map>

namespace vssa {

Tensor<float> image_to_tensor(const Image8& im) {
    Tensor<float> t = Tensor<float>::zeros({1, 3, im.h, im.w});
    float* out = t.ptr();
    const std::int64_t plane = static_cast<std::int64_t>(im.h) * im.w;
    // Per-channel mean subtraction: with no normalization layers in the net,
    // a large constant background component swamps the object signal and
    // training falls into a constant-output equilibrium. Centering each
    // channel puts flat background regions near zero.
    //
    // The x16 gain compensates the backbone's init-time attenuation (roughly
    // 2x per conv block, ~4e-4 across the stack), putting the deepest tap —
    // which feeds its detection head with no normalization in between — on an
    // O(1) scale. Biases start at zero, so the net is positively homogeneous
    // and the gain is exactly a rescaling of the deep features: the
    // L2-normalized branches are untouched, and SGD no longer has to inflate
    // the whole stack to make the coarse head responsive (that inflation is
    // bias-led and was erasing per-cell feature contrast).
    double mean[3] = {0, 0, 0};
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) mean[c] += im.rgb[static_cast<std::size_t>(i * 3 + c)];
    }
    for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(plane);
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = im.rgb[static_cast<std::size_t>(i * 3 + c)] - mean[c];
            out[c * plane + i] = static_cast<float>(v * 16.0);
        }
    }
    return t;
}

void sgd_step(ParamStore<float>& ps, const std::vector<std::vector<float>>& grads, const SgdConfig& cfg) {
    auto& params = ps.all();
    if (grads.size() != params.size()) {
        throw std::invalid_argument("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                                    std::to_string(params.size()) + " parameters");
    }
    const float lr = static_cast<float>(cfg.lr);
    const float m = static_cast<float>(cfg.momentum);
    const float wd = static_cast<float>(cfg.weight_decay);
    std::size_t i = 0;
    for (auto& p : params) {
        const auto& g = grads[i++];
        if (static_cast<std::int64_t>(g.size()) != p.value.size()) {
            throw std::invalid_argument("sgd_step: gradient size mismatch for " + p.name);
        }
        if (p.velocity.size() == 0) p.velocity = Tensor<float>::zeros(p.value.shape);
        float* v = p.velocity.ptr();
        float* w = p.value.ptr();
        const float decay = p.decay ? wd : 0.0f;
        for (std::int64_t j = 0; j < p.value.size(); ++j) {
            if (!std::isfinite(g[static_cast<std::size_t>(j)])) {
                throw NumericalError("non-finite gradient for parameter '" + p.name + "'");
            }
            v[j] = m * v[j] + g[static_cast<std::size_t>(j)] + decay * w[j];
            w[j] -= lr * v[j];
        }
    }
}

namespace {

// Boxes shrunk below one pixel by the jitter can't be matched or regressed.
std::vector<GtBox> scale_gts(const std::vector<GtBox>& gts, double sx, double sy) {
    std::vector<GtBox> out;
    for (const auto& g : gts) {
        GtBox s{g.xmin * sx, g.ymin * sy, g.xmax * sx, g.ymax * sy, g.cls};
        if (s.xmax - s.xmin >= 1.0 && s.ymax - s.ymin >= 1.0) out.push_back(s);
    }
    return out;
}

}  // namespace

TrainResult train(DetectorModel<float>& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                  const std::function<void(int, double)>& progress) {
    cfg.validate();
    if (data.empty()) throw ConfigError("train: no training samples");

    Rng rng(cfg.seed ^ 0x7261696e);  // decorrelate from the init stream
    std::map<int, std::vector<Anchor>> anchor_cache;
    auto& params = model.params();
    TrainResult result;
    result.loss_history.reserve(static_cast<std::size_t>(cfg.iterations));

    std::vector<std::vector<float>> grad_sum(params.all().size());

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double jitter = cfg.scales[static_cast<std::size_t>(rng.uniform_int(
            0, static_cast<int>(cfg.scales.size()) - 1))];
        const int size = std::max(64, static_cast<int>(std::lround(cfg.model.input_size * jitter)));
        auto cached = anchor_cache.find(size);
        if (cached == anchor_cache.end()) cached = anchor_cache.emplace(size, model.anchors(size)).first;
        const auto& anchors = cached->second;

        {
            std::size_t pi = 0;
            for (const auto& p : params.all()) {
                grad_sum[pi].assign(static_cast<std::size_t>(p.value.size()), 0.0f);
                ++pi;
            }
        }

        double loss_sum = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            int idx = rng.uniform_int(0, static_cast<int>(data.size()) - 1);
            std::vector<GtBox> gts;
            for (int attempt = 0; attempt < 100; ++attempt) {
                const auto& s = data[static_cast<std::size_t>(idx)];
                gts = scale_gts(s.gts, static_cast<double>(size) / s.image.w, static_cast<double>(size) / s.image.h);
                if (!gts.empty() || s.gts.empty()) break;  // empty-by-design images train as background
                ++result.skipped_samples;
                idx = rng.uniform_int(0, static_cast<int>(data.size()) - 1);
            }
            const auto& sample = data[static_cast<std::size_t>(idx)];
            const Image8 scaled = resize_nearest(sample.image, size, size);

            Tape<float> tape;
            params.bind(tape);
            auto input = tape.leaf(image_to_tensor(scaled));
            auto out = model.forward(&tape, input);
            const auto match = match_anchors(anchors, gts, size);
            const auto negs = mine_hard_negatives(out.class_logits, match);
            auto loss = detection_loss_mined(&tape, out.class_logits, out.box_deltas, match, negs, cfg.alpha);
            const double lv = loss.at(0);
            if (!std::isfinite(lv)) {
                throw NumericalError("training loss became non-finite at iteration " + std::to_string(iter));
            }
            loss_sum += lv;
            tape.backward(loss);
            std::size_t pi = 0;
            for (const auto& p : params.all()) {
                const auto g = tape.grad(p.value);
                float* acc = grad_sum[pi].data();
                for (std::size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
                ++pi;
            }
        }

        const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
        for (auto& g : grad_sum)
            for (float& v : g) v *= inv_batch;
        sgd_step(params, grad_sum, {cfg.learning_rate, cfg.momentum, cfg.weight_decay});

        const double mean_loss = loss_sum / cfg.batch_size;
        result.loss_history.push_back(mean_loss);
        if (progress) progress(iter, mean_loss);
    }
    return result;
}

std::vector<Detection> run_inference(const DetectorModel<float>& model, const Image8& image, int input_size,
                                     double score_thresh) {
    const Image8 scaled =
        (image.w == input_size && image.h == input_size) ? image : resize_nearest(image, input_size, input_size);
    auto out = model.forward(nullptr, image_to_tensor(scaled));
    auto probs = ops::softmax<float>(nullptr, out.class_logits, 1);
    std::vector<double> probs_v(static_cast<std::size_t>(probs.size()));
    for (std::int64_t i = 0; i < probs.size(); ++i) probs_v[static_cast<std::size_t>(i)] = probs.at(i);
    std::vector<double> deltas_v(static_cast<std::size_t>(out.box_deltas.size()));
    for (std::int64_t i = 0; i < out.box_deltas.size(); ++i) {
        deltas_v[static_cast<std::size_t>(i)] = out.box_deltas.at(i);
    }
    auto dets = decode_and_nms(probs_v, deltas_v, model.anchors(input_size), model.config().num_classes, input_size,
                               score_thresh);
    const double sx = static_cast<double>(image.w) / input_size;
    const double sy = static_cast<double>(image.h) / input_size;
    for (auto& d : dets) {
        d.box.xmin *= sx;
        d.box.xmax *= sx;
        d.box.ymin *= sy;
        d.box.ymax *= sy;
    }
    return dets;
}

}  // namespace vssa
