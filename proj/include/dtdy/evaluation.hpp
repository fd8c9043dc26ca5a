#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dtdy/audio.hpp"
#include "dtdy/model.hpp"

namespace dtdy {

struct Trial {
    int label = 0;  // 1 target, 0 nontarget
    std::string path_a, path_b;
};

/// Whitespace-separated rows: `label path_a path_b`.
std::vector<Trial> read_trials(const std::string& path);

struct EvalReport {
    double eer = 0.0;
    double eer_threshold = 0.0;
    double min_dcf = 0.0;
    double dcf_threshold = 0.0;
    std::int64_t n_target = 0;
    std::int64_t n_nontarget = 0;
};

/// Ten 4 s segments per utterance, L2-normalized embeddings at scoring time;
/// rows of the returned [10, emb_dim] matrix are unit length. The model must
/// already be in eval mode (safe to call from several threads).
Tensor utterance_eval_embeddings(Model& m, const Waveform& w);

/// Mean of the 10 x 10 cosine similarity grid between the two segment sets.
double score_trial(Model& m, const Waveform& a, const Waveform& b);

/// Threshold sweep over all distinct scores; FRR(t) = frac targets < t,
/// FAR(t) = frac nontargets >= t; EER at the interpolated crossing.
std::pair<double, double> compute_eer(const std::vector<double>& target_scores,
                                      const std::vector<double>& nontarget_scores);

/// Normalized detection cost over score midpoints plus both extremes;
/// cost = c_miss*p_target*P_miss + c_fa*(1-p_target)*P_fa, divided by
/// min(c_miss*p_target, c_fa*(1-p_target)).
std::pair<double, double> compute_min_dcf(const std::vector<double>& target_scores,
                                          const std::vector<double>& nontarget_scores, double p_target = 0.05,
                                          double c_miss = 1.0, double c_fa = 1.0);

/// Scores every trial (per-utterance embeddings cached and, when threads > 1,
/// precomputed in parallel), computes EER/minDCF, and writes scores.csv,
/// det.csv and report.txt under out_dir (skipped when out_dir is empty).
EvalReport evaluate(Model& m, const std::vector<Trial>& trials, const std::string& out_dir, int threads = 1);

}  // namespace dtdy
