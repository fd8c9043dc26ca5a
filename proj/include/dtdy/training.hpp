#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtdy/audio.hpp"
#include "dtdy/model.hpp"
#include "dtdy/tensor.hpp"

namespace dtdy {

struct BatchPlan {
    std::int64_t speakers_per_batch = 16;  // two utterances per speaker, batch = 2N segments
};

struct AdamConfig {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 5e-5;  // coupled L2, added to the gradient
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<NamedTensor>& params);
    bool initialized() const { return !m.empty(); }
};

/// Classic Adam with bias correction; weight decay enters the gradient before
/// the moment updates. lr = 0 leaves parameters bit-identical.
void adam_step(std::vector<NamedTensor>& params, AdamState& state, const AdamConfig& cfg, double lr);

/// base * decay^floor(epoch / step_epochs).
double lr_schedule(std::int64_t epoch, double base = 1e-3, double decay = 0.75, std::int64_t step_epochs = 10);

/// Mean cross-entropy of logits rows against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

/// Cross-entropy of affine(emb) against speaker labels.
Tensor softmax_loss(const Tensor& emb, const std::vector<std::int64_t>& labels, const Tensor& head_w,
                    const Tensor& head_b);

/// emb: [N, 2, D]; row i supplies query emb[i,0] and prototype emb[i,1].
/// S[i][j] = w * cos(query_i, proto_j) + b, w clamped at 1e-6; mean
/// cross-entropy against the diagonal. Differentiable in emb, w and b.
Tensor angular_prototypical_loss(const Tensor& emb, const Tensor& w, const Tensor& b);

/// Unweighted sum.
Tensor combined_loss(const Tensor& ap, const Tensor& sm);

struct BatchRow {
    std::string speaker;
    std::int64_t label = 0;  // global speaker index
    std::string utt_query;
    std::string utt_proto;
};

struct Batch {
    std::vector<BatchRow> rows;
};

/// Sorted distinct speaker ids -> index.
std::vector<std::string> speaker_ids(const std::vector<ManifestEntry>& manifest);

/// One epoch of batches: speakers shuffled, two distinct utterances each,
/// batches of exactly N speakers (remainder dropped). Speakers with fewer
/// than two utterances are skipped with a warning; fewer than N eligible
/// speakers is an error.
std::vector<Batch> make_batches(const std::vector<ManifestEntry>& manifest, const BatchPlan& plan, Rng& rng,
                                std::vector<std::string>* warnings = nullptr);

struct TrainConfig {
    std::int64_t epochs = 30;
    BatchPlan plan;
    AdamConfig adam;
    double base_lr = 1e-3;
    double lr_decay = 0.75;
    std::int64_t lr_step_epochs = 10;
    std::uint64_t seed = 1;
    std::string out_dir;
    std::int64_t checkpoint_every = 1;
    bool quiet = false;
};

struct TrainResult {
    std::vector<double> loss_history;  // per step
    std::string last_checkpoint;
    std::int64_t steps = 0;
};

/// Full loop: per epoch, sample 2 s segments, featurize, forward, combined
/// angular-prototypical + softmax loss, Adam. Writes loss.csv and per-epoch
/// checkpoints under out_dir. Resumable from a checkpoint with optimizer
/// state; batch order depends only on (seed, epoch).
TrainResult train(Model& model, const std::vector<ManifestEntry>& manifest, const TrainConfig& cfg,
                  const Checkpoint* resume = nullptr);

}  // namespace dtdy
