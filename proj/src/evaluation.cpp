#include "dtdy/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dtdy/errors.hpp"

namespace dtdy {

std::vector<Trial> read_trials(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open trial list: " + path);
    std::vector<Trial> trials;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        Trial t;
        if (!(ss >> t.label >> t.path_a >> t.path_b) || (t.label != 0 && t.label != 1))
            throw config_error("malformed trial row " + std::to_string(lineno) + " in " + path);
        trials.push_back(std::move(t));
    }
    if (trials.empty()) throw config_error("trial list is empty: " + path);
    return trials;
}

Tensor utterance_eval_embeddings(Model& m, const Waveform& w) {
    if (m.train_mode) throw std::invalid_argument("utterance_eval_embeddings: model must be in eval mode");
    const auto segs = sample_eval_segments(w);
    std::vector<Tensor> feats;
    feats.reserve(segs.size());
    for (const auto& s : segs) feats.push_back(normalize(log_mel(s)));
    Tensor emb = forward_embedding(m, stack_segments(feats));  // [10, D]
    const auto B = emb.dim(0), D = emb.dim(1);
    std::vector<double> v = emb.data();
    for (std::int64_t i = 0; i < B; ++i) {
        double ss = 0.0;
        for (std::int64_t d = 0; d < D; ++d) ss += v[static_cast<std::size_t>(i * D + d)] * v[static_cast<std::size_t>(i * D + d)];
        const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
        for (std::int64_t d = 0; d < D; ++d) v[static_cast<std::size_t>(i * D + d)] *= inv;
    }
    return Tensor({B, D}, std::move(v));
}

namespace {

double mean_cosine_grid(const Tensor& ea, const Tensor& eb) {
    const auto na = ea.dim(0), nb = eb.dim(0), D = ea.dim(1);
    double sum = 0.0;
    for (std::int64_t i = 0; i < na; ++i)
        for (std::int64_t j = 0; j < nb; ++j) {
            double dot = 0.0;
            for (std::int64_t d = 0; d < D; ++d)
                dot += ea.data()[static_cast<std::size_t>(i * D + d)] * eb.data()[static_cast<std::size_t>(j * D + d)];
            sum += dot;
        }
    return sum / static_cast<double>(na * nb);
}

}  // namespace

double score_trial(Model& m, const Waveform& a, const Waveform& b) {
    m.train_mode = false;
    return mean_cosine_grid(utterance_eval_embeddings(m, a), utterance_eval_embeddings(m, b));
}

std::pair<double, double> compute_eer(const std::vector<double>& target_scores,
                                      const std::vector<double>& nontarget_scores) {
    if (target_scores.empty() || nontarget_scores.empty())
        throw std::invalid_argument("compute_eer: both score lists must be non-empty");
    std::vector<double> ts = target_scores, ns = nontarget_scores;
    std::sort(ts.begin(), ts.end());
    std::sort(ns.begin(), ns.end());
    std::vector<double> cand = ts;
    cand.insert(cand.end(), ns.begin(), ns.end());
    std::sort(cand.begin(), cand.end());
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

    const double nt = static_cast<double>(ts.size()), nn = static_cast<double>(ns.size());
    auto frr_at = [&](double th) {
        return static_cast<double>(std::lower_bound(ts.begin(), ts.end(), th) - ts.begin()) / nt;
    };
    auto far_at = [&](double th) {
        return static_cast<double>(ns.end() - std::lower_bound(ns.begin(), ns.end(), th)) / nn;
    };

    double prev_th = cand[0], prev_frr = frr_at(cand[0]), prev_far = far_at(cand[0]);
    if (prev_frr == prev_far) return {prev_frr, prev_th};
    for (std::size_t i = 1; i <= cand.size(); ++i) {
        double th, frr, far;
        if (i < cand.size()) {
            th = cand[i];
            frr = frr_at(th);
            far = far_at(th);
        } else {
            th = cand.back() + 1.0;  // beyond all scores: reject everything
            frr = 1.0;
            far = 0.0;
        }
        if (frr == far) return {frr, th};
        if (frr > far) {
            const double alpha = (prev_far - prev_frr) / ((frr - prev_frr) + (prev_far - far));
            return {prev_frr + alpha * (frr - prev_frr), prev_th + alpha * (th - prev_th)};
        }
        prev_th = th;
        prev_frr = frr;
        prev_far = far;
    }
    return {prev_frr, prev_th};  // unreachable: the virtual endpoint always crosses
}

std::pair<double, double> compute_min_dcf(const std::vector<double>& target_scores,
                                          const std::vector<double>& nontarget_scores, double p_target,
                                          double c_miss, double c_fa) {
    if (target_scores.empty() || nontarget_scores.empty())
        throw std::invalid_argument("compute_min_dcf: both score lists must be non-empty");
    std::vector<double> ts = target_scores, ns = nontarget_scores;
    std::sort(ts.begin(), ts.end());
    std::sort(ns.begin(), ns.end());
    std::vector<double> all = ts;
    all.insert(all.end(), ns.begin(), ns.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    std::vector<double> cand;
    cand.push_back(all.front() - 1.0);  // accept everything
    for (std::size_t i = 0; i + 1 < all.size(); ++i) cand.push_back((all[i] + all[i + 1]) / 2.0);
    cand.push_back(all.back() + 1.0);  // reject everything

    const double nt = static_cast<double>(ts.size()), nn = static_cast<double>(ns.size());
    const double norm = std::min(c_miss * p_target, c_fa * (1.0 - p_target));
    double best = 0.0, best_th = 0.0;
    bool first = true;
    for (double th : cand) {
        const double pm = static_cast<double>(std::lower_bound(ts.begin(), ts.end(), th) - ts.begin()) / nt;
        const double pf = static_cast<double>(ns.end() - std::lower_bound(ns.begin(), ns.end(), th)) / nn;
        const double cost = (c_miss * p_target * pm + c_fa * (1.0 - p_target) * pf) / norm;
        if (first || cost < best) {
            best = cost;
            best_th = th;
            first = false;
        }
    }
    return {best, best_th};
}

EvalReport evaluate(Model& m, const std::vector<Trial>& trials, const std::string& out_dir, int threads) {
    if (trials.empty()) throw config_error("evaluate: no trials");
    m.train_mode = false;

    std::vector<std::string> paths;
    std::map<std::string, std::size_t> slot;
    for (const auto& t : trials)
        for (const auto* p : {&t.path_a, &t.path_b})
            if (slot.emplace(*p, paths.size()).second) paths.push_back(*p);

    std::vector<Tensor> emb(paths.size());
    auto embed_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) emb[i] = utterance_eval_embeddings(m, read_wav(paths[i]));
    };
    if (threads <= 1 || paths.size() < 2) {
        embed_range(0, paths.size());
    } else {
        const auto nw = std::min<std::size_t>(static_cast<std::size_t>(threads), paths.size());
        std::vector<std::thread> pool;
        std::mutex err_mtx;
        std::exception_ptr err;
        for (std::size_t w = 0; w < nw; ++w) {
            const std::size_t lo = paths.size() * w / nw, hi = paths.size() * (w + 1) / nw;
            pool.emplace_back([&, lo, hi] {
                try {
                    embed_range(lo, hi);
                } catch (...) {
                    std::lock_guard<std::mutex> g(err_mtx);
                    if (!err) err = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        if (err) std::rethrow_exception(err);
    }

    std::vector<double> scores(trials.size());
    std::vector<double> tgt, non;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        scores[i] = mean_cosine_grid(emb[slot[trials[i].path_a]], emb[slot[trials[i].path_b]]);
        (trials[i].label == 1 ? tgt : non).push_back(scores[i]);
    }
    if (tgt.empty() || non.empty())
        throw config_error("evaluate: need at least one target and one nontarget trial");

    EvalReport rep;
    rep.n_target = static_cast<std::int64_t>(tgt.size());
    rep.n_nontarget = static_cast<std::int64_t>(non.size());
    std::tie(rep.eer, rep.eer_threshold) = compute_eer(tgt, non);
    std::tie(rep.min_dcf, rep.dcf_threshold) = compute_min_dcf(tgt, non);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        char buf[512];
        {
            std::ofstream os(out_dir + "/scores.csv");
            if (!os) throw io_error("cannot write scores under " + out_dir);
            os << "label,path_a,path_b,score\n";
            for (std::size_t i = 0; i < trials.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%d,%s,%s,%.9f\n", trials[i].label, trials[i].path_a.c_str(),
                              trials[i].path_b.c_str(), scores[i]);
                os << buf;
            }
        }
        {
            std::ofstream os(out_dir + "/det.csv");
            os << "threshold,far,frr\n";
            std::vector<double> ts = tgt, ns = non, all = tgt;
            std::sort(ts.begin(), ts.end());
            std::sort(ns.begin(), ns.end());
            all.insert(all.end(), non.begin(), non.end());
            std::sort(all.begin(), all.end());
            all.erase(std::unique(all.begin(), all.end()), all.end());
            for (double th : all) {
                const double frr = static_cast<double>(std::lower_bound(ts.begin(), ts.end(), th) - ts.begin()) /
                                   static_cast<double>(ts.size());
                const double far = static_cast<double>(ns.end() - std::lower_bound(ns.begin(), ns.end(), th)) /
                                   static_cast<double>(ns.size());
                std::snprintf(buf, sizeof(buf), "%.9f,%.9f,%.9f\n", th, far, frr);
                os << buf;
            }
        }
        {
            std::ofstream os(out_dir + "/report.txt");
            std::snprintf(buf, sizeof(buf),
                          "eer = %.9f\neer_threshold = %.9f\nmin_dcf = %.9f\ndcf_threshold = %.9f\n"
                          "n_target = %lld\nn_nontarget = %lld\n",
                          rep.eer, rep.eer_threshold, rep.min_dcf, rep.dcf_threshold,
                          static_cast<long long>(rep.n_target), static_cast<long long>(rep.n_nontarget));
            os << buf;
        }
    }
    return rep;
}

}  // namespace dtdy
