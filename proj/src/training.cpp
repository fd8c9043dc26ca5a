#include "dtdy/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>

#include "dtdy/errors.hpp"

namespace dtdy {

void AdamState::init(const std::vector<NamedTensor>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.tensor.data().size(), 0.0);
        v.emplace_back(p.tensor.data().size(), 0.0);
    }
}

void adam_step(std::vector<NamedTensor>& params, AdamState& state, const AdamConfig& cfg, double lr) {
    if (!state.initialized()) state.init(params);
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& theta = params[pi].tensor.data();
        const auto& grad = params[pi].tensor.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (m.size() != theta.size())
            throw std::invalid_argument("adam_step: shape mismatch for parameter '" + params[pi].name + "'");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i] + cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
        }
    }
}

double lr_schedule(std::int64_t epoch, double base, double decay, std::int64_t step_epochs) {
    if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
    return base * std::pow(decay, static_cast<double>(epoch / step_epochs));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: logits must be [B,n]");
    const auto B = logits.dim(0), n = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (auto l : labels)
        if (l < 0 || l >= n)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) +
                                        " out of range [0," + std::to_string(n) + ")");
    // Detached row max: shifts cancel exactly, gradient is unchanged.
    std::vector<double> mx(static_cast<std::size_t>(B));
    const double* pl = logits.data().data();
    for (std::int64_t i = 0; i < B; ++i) {
        double m = pl[i * n];
        for (std::int64_t j = 1; j < n; ++j) m = std::max(m, pl[i * n + j]);
        mx[static_cast<std::size_t>(i)] = m;
    }
    Tensor shift({B, 1}, mx);
    Tensor z = add_bcast(logits, scale(shift, -1.0));
    Tensor lse = add(log(reduce_sum(exp(z), {1})), reshape(shift, {B}));
    std::vector<double> hot(static_cast<std::size_t>(B * n), 0.0);
    for (std::int64_t i = 0; i < B; ++i) hot[static_cast<std::size_t>(i * n + labels[static_cast<std::size_t>(i)])] = 1.0;
    Tensor picked = reduce_sum(mul(logits, Tensor({B, n}, std::move(hot))), {1});
    return reduce_mean(sub(lse, picked), {0});
}

Tensor softmax_loss(const Tensor& emb, const std::vector<std::int64_t>& labels, const Tensor& head_w,
                    const Tensor& head_b) {
    return softmax_cross_entropy(affine(emb, head_w, head_b), labels);
}

Tensor angular_prototypical_loss(const Tensor& emb, const Tensor& w, const Tensor& b) {
    if (emb.rank() != 3 || emb.dim(1) != 2)
        throw std::invalid_argument("angular_prototypical_loss: embeddings must be [N,2,D], got " +
                                    shape_str(emb.shape()));
    const auto N = emb.dim(0), D = emb.dim(2);
    if (N < 2) throw std::invalid_argument("angular_prototypical_loss: need N >= 2 speakers");
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t u = 0; u < 2; ++u) {
            double ss = 0.0;
            for (std::int64_t d = 0; d < D; ++d) {
                const double x = emb.data()[static_cast<std::size_t>((i * 2 + u) * D + d)];
                ss += x * x;
            }
            if (ss == 0.0) throw numeric_error("angular_prototypical_loss: zero-norm embedding (row " +
                                               std::to_string(i) + ")");
        }
    Tensor q = reshape(slice(emb, 1, 0, 1), {N, D});
    Tensor c = reshape(slice(emb, 1, 1, 1), {N, D});
    Tensor nq = div_bcast(q, reshape(l2_norm(q, 1), {N, 1}));
    Tensor nc = div_bcast(c, reshape(l2_norm(c, 1), {N, 1}));
    Tensor cos_sim = matmul_batched(nq, permute(nc, {1, 0}));  // [N,N]
    Tensor w_eff = add_scalar(relu(add_scalar(w, -1e-6)), 1e-6);
    Tensor scores = add_bcast(mul_bcast(cos_sim, reshape(w_eff, {1, 1})), reshape(b, {1, 1}));
    std::vector<std::int64_t> diag(static_cast<std::size_t>(N));
    for (std::int64_t i = 0; i < N; ++i) diag[static_cast<std::size_t>(i)] = i;
    return softmax_cross_entropy(scores, diag);
}

Tensor combined_loss(const Tensor& ap, const Tensor& sm) { return add(ap, sm); }

std::vector<std::string> speaker_ids(const std::vector<ManifestEntry>& manifest) {
    std::set<std::string> ids;
    for (const auto& e : manifest) ids.insert(e.speaker_id);
    return {ids.begin(), ids.end()};
}

std::vector<Batch> make_batches(const std::vector<ManifestEntry>& manifest, const BatchPlan& plan, Rng& rng,
                                std::vector<std::string>* warnings) {
    if (plan.speakers_per_batch < 2) throw config_error("speakers_per_batch must be >= 2");
    const auto ids = speaker_ids(manifest);
    std::map<std::string, std::int64_t> label;
    for (std::size_t i = 0; i < ids.size(); ++i) label[ids[i]] = static_cast<std::int64_t>(i);
    std::map<std::string, std::vector<std::string>> utts;
    for (const auto& e : manifest) utts[e.speaker_id].push_back(e.path);

    std::vector<std::string> eligible;
    for (const auto& id : ids) {
        if (utts[id].size() >= 2) {
            eligible.push_back(id);
        } else if (warnings) {
            warnings->push_back("speaker '" + id + "' has fewer than 2 utterances; skipped");
        }
    }
    const auto N = plan.speakers_per_batch;
    if (static_cast<std::int64_t>(eligible.size()) < N)
        throw config_error("only " + std::to_string(eligible.size()) + " speakers have >= 2 utterances, need " +
                           std::to_string(N) + " per batch");
    rng.shuffle(eligible);
    std::vector<Batch> batches;
    for (std::size_t off = 0; off + static_cast<std::size_t>(N) <= eligible.size(); off += static_cast<std::size_t>(N)) {
        Batch batch;
        for (std::int64_t i = 0; i < N; ++i) {
            const auto& id = eligible[off + static_cast<std::size_t>(i)];
            std::vector<std::size_t> order(utts[id].size());
            for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
            rng.shuffle(order);
            BatchRow row;
            row.speaker = id;
            row.label = label[id];
            row.utt_query = utts[id][order[0]];
            row.utt_proto = utts[id][order[1]];
            batch.rows.push_back(std::move(row));
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

namespace {

std::string checkpoint_path(const std::string& out_dir, std::int64_t epoch) {
    return out_dir + "/checkpoint_epoch" + std::to_string(epoch) + ".ckpt";
}

}  // namespace

TrainResult train(Model& model, const std::vector<ManifestEntry>& manifest, const TrainConfig& cfg,
                  const Checkpoint* resume) {
    const auto ids = speaker_ids(manifest);
    if (ids.size() < 2) throw config_error("training needs at least 2 speakers in the manifest");
    if (!model.has_classifier() || model.n_classes() != static_cast<std::int64_t>(ids.size()))
        attach_classifier(model, static_cast<std::int64_t>(ids.size()));

    Tensor ap_w = Tensor::scalar(10.0, true);
    Tensor ap_b = Tensor::scalar(-5.0, true);
    auto params = parameters(model);
    params.push_back({"loss.ap_w", ap_w});
    params.push_back({"loss.ap_b", ap_b});

    AdamState state;
    state.init(params);
    std::int64_t start_epoch = 0;
    if (resume && resume->has_optim) {
        state.step = resume->optim_step;
        start_epoch = resume->next_epoch;
        std::map<std::string, const Tensor*> by_name;
        for (const auto& [name, t] : resume->optim_tensors) by_name[name] = &t;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto mi = by_name.find("m." + params[pi].name);
            auto vi = by_name.find("v." + params[pi].name);
            if (mi == by_name.end() || vi == by_name.end())
                throw io_error("resume checkpoint missing optimizer state for '" + params[pi].name + "'");
            state.m[pi] = mi->second->data();
            state.v[pi] = vi->second->data();
        }
        if (auto it = by_name.find("val.loss.ap_w"); it != by_name.end()) ap_w.data() = it->second->data();
        if (auto it = by_name.find("val.loss.ap_b"); it != by_name.end()) ap_b.data() = it->second->data();
    }

    const bool io = !cfg.out_dir.empty();
    std::ofstream log;
    if (io) {
        std::filesystem::create_directories(cfg.out_dir);
        const auto mode = start_epoch == 0 ? std::ios::trunc : std::ios::app;
        log.open(cfg.out_dir + "/loss.csv", mode);
        if (!log) throw io_error("cannot write loss log under " + cfg.out_dir);
        if (start_epoch == 0) log << "step,epoch,lr,loss_ap,loss_sm,loss_total\n";
    }

    // Utterances are read once; a desk-scale corpus fits in memory.
    std::map<std::string, Waveform> cache;
    auto wav = [&cache](const std::string& path) -> const Waveform& {
        auto it = cache.find(path);
        if (it == cache.end()) it = cache.emplace(path, read_wav(path)).first;
        return it->second;
    };

    TrainResult result;
    auto save = [&](std::int64_t next_epoch) {
        if (!io) return;
        Checkpoint ck = snapshot(model);
        ck.has_optim = true;
        ck.optim_step = state.step;
        ck.next_epoch = next_epoch;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            ck.optim_tensors.emplace_back("m." + params[pi].name,
                                          Tensor(params[pi].tensor.shape(), state.m[pi]));
            ck.optim_tensors.emplace_back("v." + params[pi].name,
                                          Tensor(params[pi].tensor.shape(), state.v[pi]));
        }
        ck.optim_tensors.emplace_back("val.loss.ap_w", ap_w.detached());
        ck.optim_tensors.emplace_back("val.loss.ap_b", ap_b.detached());
        const auto path = checkpoint_path(cfg.out_dir, next_epoch);
        save_checkpoint(path, ck);
        result.last_checkpoint = path;
    };

    for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_step_epochs);
        Rng order_rng(mix64(mix64(cfg.seed, 0xA5u), static_cast<std::uint64_t>(epoch)));
        std::vector<std::string> warnings;
        auto batches = make_batches(manifest, cfg.plan, order_rng, &warnings);
        if (epoch == start_epoch && !cfg.quiet)
            for (const auto& w : warnings) std::cerr << "# warning: " << w << "\n";

        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Rng seg_rng(mix64(mix64(cfg.seed, 0x5E6u),
                              static_cast<std::uint64_t>(epoch) * 1000003u + static_cast<std::uint64_t>(bi)));
            std::vector<Tensor> segments;
            std::vector<std::int64_t> labels;
            for (const auto& row : batches[bi].rows) {
                for (const auto* path : {&row.utt_query, &row.utt_proto}) {
                    Waveform seg = sample_train_segment(wav(*path), seg_rng);
                    segments.push_back(normalize(log_mel(seg)));
                    labels.push_back(row.label);
                }
            }
            Tensor x = stack_segments(segments);
            const auto N = static_cast<std::int64_t>(batches[bi].rows.size());

            model.train_mode = true;
            Tape tape;
            Tensor emb = forward_embedding(model, x);  // [2N, D]
            Tensor ap = angular_prototypical_loss(reshape(emb, {N, 2, model.cfg.emb_dim}), ap_w, ap_b);
            Tensor sm = softmax_loss(emb, labels, model.cls_w, model.cls_b);
            Tensor total = combined_loss(ap, sm);
            if (!std::isfinite(total.item()))
                throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                                    std::to_string(state.step + 1));
            for (auto& p : params) p.tensor.zero_grad();
            tape.backward(total);
            adam_step(params, state, cfg.adam, lr);

            result.loss_history.push_back(total.item());
            ++result.steps;
            if (io) {
                char line[160];
                std::snprintf(line, sizeof(line), "%lld,%lld,%.9g,%.9g,%.9g,%.9g\n",
                              static_cast<long long>(state.step), static_cast<long long>(epoch), lr, ap.item(),
                              sm.item(), total.item());
                log << line;
            }
        }
        if ((epoch + 1 - start_epoch) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs) save(epoch + 1);
        if (!cfg.quiet && !result.loss_history.empty())
            std::cerr << "# epoch " << epoch << " lr " << lr << " loss " << result.loss_history.back() << "\n";
    }
    model.train_mode = false;
    return result;
}

}  // namespace dtdy
