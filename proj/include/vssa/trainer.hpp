#pragma once

#include "vssa/config.hpp"
#include "vssa/dataset.hpp"

namespace vssa {

// 8-bit RGB -> [1,3,H,W] float: per-channel mean subtracted (flat backgrounds
// land at exactly zero), then a fixed gain that counteracts the backbone's
// init-time attenuation (see the definition for the reasoning).
Tensor<float> image_to_tensor(const Image8& im);

struct TrainSample {
    Image8 image;
    std::vector<GtBox> gts;
};

struct SgdConfig {
    double lr = 3e-4;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

// v <- m*v + g + wd*p ; p <- p - lr*v. Decay applies only to parameters
// registered with the decay flag (weights, not biases/scales). Non-finite
// gradients abort with the parameter's name.
void sgd_step(ParamStore<float>& ps, const std::vector<std::vector<float>>& grads, const SgdConfig& cfg);

struct TrainResult {
    std::vector<double> loss_history;  // one entry per iteration (batch mean)
    int skipped_samples = 0;           // degenerate after scale jitter
};

// Mini-batch SGD with per-iteration scale jitter. Batches accumulate
// one-image tapes in a fixed order, so a fixed seed reproduces the loss
// history exactly.
TrainResult train(DetectorModel<float>& model, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                  const std::function<void(int, double)>& progress = nullptr);

// One scored image: forward, NMS, done. Shared by eval and detect paths.
std::vector<Detection> run_inference(const DetectorModel<float>& model, const Image8& image, int input_size,
                                     double score_thresh = 0.01);

}  // namespace vssa
