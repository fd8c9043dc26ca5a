#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dtdy/dynamic_conv.hpp"
#include "dtdy/rng.hpp"
#include "dtdy/tensor.hpp"

namespace dtdy {

enum class ConvKind { vanilla, tdy, dtdy };
enum class PoolingKind { tap, asp };

std::string to_string(ConvKind k);
std::string to_string(PoolingKind p);
ConvKind conv_kind_from_string(const std::string& s);
PoolingKind pooling_from_string(const std::string& s);

struct ModelConfig {
    double width_mult = 0.25;
    ConvKind conv_kind = ConvKind::vanilla;
    double r = 0.125;            // dtdy reduction ratio
    std::int64_t basis_count = 6;  // tdy
    PoolingKind pooling = PoolingKind::tap;
    std::int64_t emb_dim = 512;
    std::vector<std::int64_t> stage_blocks = {3, 4, 6, 3};
    std::int64_t input_mel_bins = 64;
    std::vector<std::int64_t> custom_channels;  // overrides width_mult * [64,128,256,512]

    std::vector<std::int64_t> stage_channels() const;
    /// "DTDY-ResNet-34(x0.50)" style label.
    std::string name() const;
};

struct VanillaConv {
    Tensor weight;  // [C_out, C_in, k, k], no bias (absorbed by batch norm)
    Conv2dGeom geom;
};

using ConvUnit = std::variant<VanillaConv, TdyConvParams, DtdyConvParams>;

struct BatchNorm {
    Tensor gamma, beta;                // trainable
    Tensor running_mean, running_var;  // buffers
};

struct BasicBlock {
    ConvUnit conv1;
    BatchNorm bn1;
    ConvUnit conv2;
    BatchNorm bn2;
    std::optional<VanillaConv> proj;  // 1x1 projection shortcut when shape changes
    std::optional<BatchNorm> proj_bn;
};

struct AspParams {
    Tensor w;  // [A, D]
    Tensor b;  // [A]
    Tensor v;  // [1, A]
};

struct Model {
    ModelConfig cfg;
    VanillaConv stem;
    BatchNorm stem_bn;
    std::vector<std::vector<BasicBlock>> stages;
    std::optional<AspParams> asp;
    Tensor emb_w;  // [emb_dim, pooled_dim]
    Tensor emb_b;  // [emb_dim]
    Tensor cls_w;  // classifier head, undefined until attached
    Tensor cls_b;
    bool train_mode = false;

    std::int64_t feature_dim = 0;   // C * F' of the last stage
    std::int64_t final_freq = 0;    // F' of the last stage
    std::int64_t time_stride() const { return std::int64_t{1} << (static_cast<std::int64_t>(stages.size()) - 1); }
    bool has_classifier() const { return cls_w.defined(); }
    std::int64_t n_classes() const { return has_classifier() ? cls_w.dim(0) : 0; }
};

Model build_model(const ModelConfig& cfg, Rng& rng);

/// Optional tap into intermediate activations ("stem" or "stage<i>.block<j>",
/// 1-based stage, 0-based block).
struct ForwardProbe {
    std::string layer = "stem";
    Tensor activation;  // post-activation output of the tapped layer
};

/// Backbone features before pooling: [B, C, F', T'].
Tensor forward_features(Model& m, const Tensor& x, ForwardProbe* probe = nullptr);

/// Mean over time then flatten (C, F'): [B, C, F', T'] -> [B, C*F'].
Tensor tap_pool(const Tensor& frames);

/// frames: [B, D, T'] -> [B, 2D]; attention-weighted mean and std with the
/// variance floored at 1e-9.
Tensor asp_pool(const Tensor& frames, const AspParams& p);

/// [B, emb_dim]; raw (not length-normalized) speaker embeddings.
Tensor forward_embedding(Model& m, const Tensor& x, ForwardProbe* probe = nullptr);

/// [B, T', emb_dim]: temporal pooling bypassed, the embedding affine applied
/// per time bin (ASP models pair each frame with the floored std so the
/// affine input width matches).
Tensor forward_frame_embeddings(Model& m, const Tensor& x);

/// [B, n_classes]; requires an attached classifier.
Tensor forward_logits(Model& m, const Tensor& x, ForwardProbe* probe = nullptr);

/// Zero-initialized affine head emb_dim -> n_speakers.
void attach_classifier(Model& m, std::int64_t n_speakers);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

std::vector<NamedTensor> parameters(Model& m);  // trainable
std::vector<NamedTensor> buffers(Model& m);     // batch-norm running stats

std::int64_t count_params(const Model& m);

/// Stacks [F,T] segments into a [B,1,F,T] batch.
Tensor stack_segments(const std::vector<Tensor>& segments);

// ---- checkpoints ----
// Single file: version line, config as key = value text, then each named
// tensor as a header line plus raw little-endian doubles. Byte-exact
// round-trip.
struct Checkpoint {
    ModelConfig config;
    std::int64_t n_classes = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;        // params + buffers
    bool has_optim = false;
    std::int64_t optim_step = 0;
    std::int64_t next_epoch = 0;
    std::vector<std::pair<std::string, Tensor>> optim_tensors;  // moments + loss scalars
};

Checkpoint snapshot(Model& m);
Model model_from_checkpoint(const Checkpoint& ck);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace dtdy
