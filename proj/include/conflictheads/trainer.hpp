#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conflictheads/model.hpp"
#include "conflictheads/synthdata.hpp"

namespace conflictheads {

// Premise-bias curriculum: every item is a 50/50 draw between a clean query
// (target = scene answer) and a conflict query whose target follows the
// textual premise with probability bias_mix and the scene otherwise.
struct TrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double learning_rate = 0.05;
    double bias_mix = 0.5;
    std::uint64_t seed = 0;
    int eval_every = 100;

    void validate() const;
};

struct CurvePoint {
    int step = 0;
    double loss = 0.0;
    double clean_accuracy = 0.0;      // most recent held-out evaluation
    double hallucination_rate = 0.0;  // most recent held-out evaluation
};

struct TrainResult {
    Weights weights;
    std::vector<CurvePoint> curve;  // one row per optimization step
};

// Cross-entropy of the next-token distribution at the answer position.
double loss(std::span<const double> logits, TokenId target);

// Analytic gradient of loss() w.r.t. every parameter, in ParamLayout order.
std::vector<double> item_gradient(const Weights& weights, const TokenSequence& input,
                                  TokenId target, double* loss_out = nullptr);

// Max relative error between analytic and central-difference gradients over
// n_sampled randomly chosen parameters.
double grad_check(const Weights& weights, const TokenSequence& input, TokenId target,
                  double epsilon, int n_sampled, std::uint64_t seed);

// Plain SGD; deterministic given (initial weights, data, config). Training
// draws items from the proto/probe/train splits; curve evaluations use the
// validation split (or the training pool when no validation split exists).
TrainResult train(const Weights& initial, const Dataset& data, const TrainConfig& config);

// Curve file: CSV with header `step,loss,clean_accuracy,hallucination_rate`.
void save_curve(const std::string& path, const std::vector<CurvePoint>& curve);
std::vector<CurvePoint> load_curve(const std::string& path);

}  // namespace conflictheads
