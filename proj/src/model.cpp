#include "dtdy/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "dtdy/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian doubles");

namespace dtdy {

std::string to_string(ConvKind k) {
    switch (k) {
        case ConvKind::vanilla: return "vanilla";
        case ConvKind::tdy: return "tdy";
        case ConvKind::dtdy: return "dtdy";
    }
    return "?";
}

std::string to_string(PoolingKind p) { return p == PoolingKind::tap ? "tap" : "asp"; }

ConvKind conv_kind_from_string(const std::string& s) {
    if (s == "vanilla") return ConvKind::vanilla;
    if (s == "tdy") return ConvKind::tdy;
    if (s == "dtdy") return ConvKind::dtdy;
    throw config_error("unknown convolution kind '" + s + "' (expected vanilla|tdy|dtdy)");
}

PoolingKind pooling_from_string(const std::string& s) {
    if (s == "tap") return PoolingKind::tap;
    if (s == "asp") return PoolingKind::asp;
    throw config_error("unknown pooling kind '" + s + "' (expected tap|asp)");
}

std::vector<std::int64_t> ModelConfig::stage_channels() const {
    if (!custom_channels.empty()) return custom_channels;
    std::vector<std::int64_t> out;
    for (int base : {64, 128, 256, 512}) out.push_back(std::llround(width_mult * base));
    out.resize(stage_blocks.size(), out.empty() ? 1 : out.back());
    return out;
}

std::string ModelConfig::name() const {
    std::int64_t total = 0;
    for (auto b : stage_blocks) total += b;
    std::string prefix;
    if (conv_kind == ConvKind::tdy) prefix = "TDY-";
    if (conv_kind == ConvKind::dtdy) prefix = "DTDY-";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "ResNet-%lld(x%.2f)", static_cast<long long>(2 + 2 * total), width_mult);
    std::string s = prefix + buf;
    if (pooling == PoolingKind::asp) s += "+ASP";
    return s;
}

namespace {

BatchNorm make_bn(std::int64_t channels) {
    BatchNorm bn;
    bn.gamma = Tensor({channels}, 1.0, true);
    bn.beta = Tensor({channels}, 0.0, true);
    bn.running_mean = Tensor({channels}, 0.0, false);
    bn.running_var = Tensor({channels}, 1.0, false);
    return bn;
}

ConvUnit make_unit(const ModelConfig& cfg, std::int64_t c_in, std::int64_t c_out, std::int64_t f_nom,
                   const Conv2dGeom& geom, Rng& rng) {
    switch (cfg.conv_kind) {
        case ConvKind::vanilla:
            return VanillaConv{fan_in_uniform({c_out, c_in, 3, 3}, c_in * 9, rng), geom};
        case ConvKind::tdy:
            return make_tdy_conv(c_in, c_out, 3, f_nom, cfg.basis_count, geom, rng);
        case ConvKind::dtdy:
            return make_dtdy_conv(c_in, c_out, 3, f_nom, cfg.r, geom, rng);
    }
    throw std::logic_error("unreachable");
}

Tensor conv_unit_forward(const ConvUnit& u, const Tensor& x) {
    if (const auto* v = std::get_if<VanillaConv>(&u)) return conv2d(x, v->weight, v->geom);
    if (const auto* t = std::get_if<TdyConvParams>(&u)) return tdy_forward(x, *t);
    return dtdy_forward(x, std::get<DtdyConvParams>(u));
}

Tensor bn_forward(Model& m, BatchNorm& bn, const Tensor& x) {
    return batch_norm2d(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, m.train_mode);
}

}  // namespace

Model build_model(const ModelConfig& cfg, Rng& rng) {
    Model m;
    m.cfg = cfg;
    const auto chans = cfg.stage_channels();
    for (auto c : chans)
        if (c < 1) throw config_error("model config derives non-positive channel count");
    if (cfg.emb_dim < 8) throw config_error("embedding dimension must be >= 8");
    if (cfg.stage_blocks.empty()) throw config_error("model needs at least one stage");

    m.stem = VanillaConv{fan_in_uniform({chans[0], 1, 3, 3}, 9, rng), Conv2dGeom{1, 1, 1, 1}};
    m.stem_bn = make_bn(chans[0]);

    std::int64_t f = cfg.input_mel_bins;
    std::int64_t c_in = chans[0];
    for (std::size_t s = 0; s < cfg.stage_blocks.size(); ++s) {
        std::vector<BasicBlock> blocks;
        const auto c = chans[s];
        for (std::int64_t b = 0; b < cfg.stage_blocks[s]; ++b) {
            const std::int64_t stride = (s > 0 && b == 0) ? 2 : 1;
            const std::int64_t in_c = (b == 0) ? c_in : c;
            BasicBlock blk;
            blk.conv1 = make_unit(cfg, in_c, c, f, Conv2dGeom{stride, stride, 1, 1}, rng);
            const std::int64_t f_next = (f + 2 - 3) / stride + 1;
            blk.conv2 = make_unit(cfg, c, c, f_next, Conv2dGeom{1, 1, 1, 1}, rng);
            if (b == 0 && (stride != 1 || in_c != c)) {
                blk.proj = VanillaConv{fan_in_uniform({c, in_c, 1, 1}, in_c, rng),
                                       Conv2dGeom{stride, stride, 0, 0}};
                blk.proj_bn = make_bn(c);
            }
            blk.bn1 = make_bn(c);
            blk.bn2 = make_bn(c);
            blocks.push_back(std::move(blk));
            f = f_next;
        }
        m.stages.push_back(std::move(blocks));
        c_in = c;
    }
    m.final_freq = f;
    m.feature_dim = chans.back() * f;
    const std::int64_t pooled = (cfg.pooling == PoolingKind::asp) ? 2 * m.feature_dim : m.feature_dim;
    if (cfg.pooling == PoolingKind::asp) {
        const std::int64_t a = std::max<std::int64_t>(1, m.feature_dim / 8);
        AspParams asp;
        asp.w = fan_in_uniform({a, m.feature_dim}, m.feature_dim, rng);
        asp.b = Tensor({a}, 0.0, true);
        asp.v = fan_in_uniform({1, a}, a, rng);
        m.asp = std::move(asp);
    }
    m.emb_w = fan_in_uniform({cfg.emb_dim, pooled}, pooled, rng);
    m.emb_b = Tensor({cfg.emb_dim}, 0.0, true);
    return m;
}

Tensor forward_features(Model& m, const Tensor& x, ForwardProbe* probe) {
    if (x.rank() != 4 || x.dim(1) != 1)
        throw std::invalid_argument("forward: input must be [B,1,F,T], got " + shape_str(x.shape()));
    if (x.dim(2) != m.cfg.input_mel_bins)
        throw std::invalid_argument("forward: input frequency size " + std::to_string(x.dim(2)) +
                                    " does not match model (" + std::to_string(m.cfg.input_mel_bins) + ")");
    Tensor h = relu(bn_forward(m, m.stem_bn, conv2d(x, m.stem.weight, m.stem.geom)));
    if (probe && probe->layer == "stem") probe->activation = h;
    for (std::size_t s = 0; s < m.stages.size(); ++s) {
        for (std::size_t b = 0; b < m.stages[s].size(); ++b) {
            BasicBlock& blk = m.stages[s][b];
            Tensor in = h;
            h = relu(bn_forward(m, blk.bn1, conv_unit_forward(blk.conv1, h)));
            h = bn_forward(m, blk.bn2, conv_unit_forward(blk.conv2, h));
            Tensor sc = in;
            if (blk.proj) sc = bn_forward(m, *blk.proj_bn, conv2d(in, blk.proj->weight, blk.proj->geom));
            h = relu(add(h, sc));
            if (probe) {
                const std::string tag = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
                if (probe->layer == tag) probe->activation = h;
            }
        }
    }
    return h;
}

Tensor tap_pool(const Tensor& frames) {
    if (frames.rank() != 4) throw std::invalid_argument("tap_pool: expected [B,C,F,T]");
    const auto B = frames.dim(0), C = frames.dim(1), F = frames.dim(2);
    return reshape(reduce_mean(frames, {3}), {B, C * F});
}

Tensor asp_pool(const Tensor& frames, const AspParams& p) {
    if (frames.rank() != 3) throw std::invalid_argument("asp_pool: expected [B,D,T]");
    Tensor ht = permute(frames, {0, 2, 1});  // [B,T,D]
    Tensor u = dtdy::tanh(affine(ht, p.w, p.b));
    Tensor vb({1}, 0.0);
    Tensor e = affine(u, p.v, vb);           // [B,T,1]
    Tensor alpha = softmax(e, 1);
    Tensor mu = reduce_sum(mul_bcast(ht, alpha), {1});            // [B,D]
    Tensor m2 = reduce_sum(mul_bcast(mul(ht, ht), alpha), {1});
    Tensor sigma = dtdy::sqrt(clamp_min(sub(m2, mul(mu, mu)), 1e-9));
    return concat({mu, sigma}, 1);
}

Tensor forward_embedding(Model& m, const Tensor& x, ForwardProbe* probe) {
    Tensor feat = forward_features(m, x, probe);  // [B,C,F,T]
    Tensor pooled;
    if (m.cfg.pooling == PoolingKind::asp) {
        const auto B = feat.dim(0);
        pooled = asp_pool(reshape(feat, {B, m.feature_dim, feat.dim(3)}), *m.asp);
    } else {
        pooled = tap_pool(feat);
    }
    return affine(pooled, m.emb_w, m.emb_b);
}

Tensor forward_frame_embeddings(Model& m, const Tensor& x) {
    Tensor feat = forward_features(m, x);               // [B,C,F,T]
    const auto B = feat.dim(0), T = feat.dim(3);
    Tensor fr = reshape(permute(feat, {0, 3, 1, 2}), {B, T, m.feature_dim});  // [B,T,D]
    if (m.cfg.pooling == PoolingKind::asp) {
        Tensor sig({B, T, m.feature_dim}, std::sqrt(1e-9));
        fr = concat({fr, sig}, 2);
    }
    return affine(fr, m.emb_w, m.emb_b);                // [B,T,emb]
}

Tensor forward_logits(Model& m, const Tensor& x, ForwardProbe* probe) {
    if (!m.has_classifier()) throw std::invalid_argument("forward_logits: no classifier attached");
    Tensor emb = forward_embedding(m, x, probe);
    return affine(emb, m.cls_w, m.cls_b);
}

void attach_classifier(Model& m, std::int64_t n_speakers) {
    if (n_speakers < 2) throw std::invalid_argument("attach_classifier: need at least 2 speakers");
    m.cls_w = Tensor({n_speakers, m.cfg.emb_dim}, 0.0, true);
    m.cls_b = Tensor({n_speakers}, 0.0, true);
}

namespace {

void collect_unit(const std::string& prefix, const ConvUnit& u, std::vector<NamedTensor>& out) {
    if (const auto* v = std::get_if<VanillaConv>(&u)) {
        out.push_back({prefix + ".w", v->weight});
    } else if (const auto* t = std::get_if<TdyConvParams>(&u)) {
        out.push_back({prefix + ".basis", t->basis});
        out.push_back({prefix + ".biases", t->biases});
        out.push_back({prefix + ".att1_w", t->att1_w});
        out.push_back({prefix + ".att1_b", t->att1_b});
        out.push_back({prefix + ".att2_w", t->att2_w});
        out.push_back({prefix + ".att2_b", t->att2_b});
    } else {
        const auto& d = std::get<DtdyConvParams>(u);
        out.push_back({prefix + ".w0", d.w0});
        out.push_back({prefix + ".q", d.q});
        out.push_back({prefix + ".p", d.p});
        out.push_back({prefix + ".fc1_w", d.fc1_w});
        out.push_back({prefix + ".fc1_b", d.fc1_b});
        out.push_back({prefix + ".fc2_w", d.fc2_w});
        out.push_back({prefix + ".fc2_b", d.fc2_b});
    }
}

}  // namespace

std::vector<NamedTensor> parameters(Model& m) {
    std::vector<NamedTensor> out;
    out.push_back({"stem.w", m.stem.weight});
    out.push_back({"stem_bn.gamma", m.stem_bn.gamma});
    out.push_back({"stem_bn.beta", m.stem_bn.beta});
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t b = 0; b < m.stages[s].size(); ++b) {
            auto& blk = m.stages[s][b];
            const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            collect_unit(p + ".conv1", blk.conv1, out);
            out.push_back({p + ".bn1.gamma", blk.bn1.gamma});
            out.push_back({p + ".bn1.beta", blk.bn1.beta});
            collect_unit(p + ".conv2", blk.conv2, out);
            out.push_back({p + ".bn2.gamma", blk.bn2.gamma});
            out.push_back({p + ".bn2.beta", blk.bn2.beta});
            if (blk.proj) {
                out.push_back({p + ".proj.w", blk.proj->weight});
                out.push_back({p + ".proj_bn.gamma", blk.proj_bn->gamma});
                out.push_back({p + ".proj_bn.beta", blk.proj_bn->beta});
            }
        }
    if (m.asp) {
        out.push_back({"asp.w", m.asp->w});
        out.push_back({"asp.b", m.asp->b});
        out.push_back({"asp.v", m.asp->v});
    }
    out.push_back({"emb.w", m.emb_w});
    out.push_back({"emb.b", m.emb_b});
    if (m.has_classifier()) {
        out.push_back({"cls.w", m.cls_w});
        out.push_back({"cls.b", m.cls_b});
    }
    return out;
}

std::vector<NamedTensor> buffers(Model& m) {
    std::vector<NamedTensor> out;
    auto push_bn = [&out](const std::string& p, const BatchNorm& bn) {
        out.push_back({p + ".running_mean", bn.running_mean});
        out.push_back({p + ".running_var", bn.running_var});
    };
    push_bn("stem_bn", m.stem_bn);
    for (std::size_t s = 0; s < m.stages.size(); ++s)
        for (std::size_t b = 0; b < m.stages[s].size(); ++b) {
            auto& blk = m.stages[s][b];
            const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            push_bn(p + ".bn1", blk.bn1);
            push_bn(p + ".bn2", blk.bn2);
            if (blk.proj_bn) push_bn(p + ".proj_bn", *blk.proj_bn);
        }
    return out;
}

std::int64_t count_params(const Model& m) {
    std::int64_t total = 0;
    for (const auto& p : parameters(const_cast<Model&>(m))) total += p.tensor.numel();
    return total;
}

Tensor stack_segments(const std::vector<Tensor>& segments) {
    if (segments.empty()) throw std::invalid_argument("stack_segments: empty batch");
    const auto F = segments[0].dim(0), T = segments[0].dim(1);
    const auto B = static_cast<std::int64_t>(segments.size());
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(B * F * T));
    for (const auto& s : segments) {
        if (s.rank() != 2 || s.dim(0) != F || s.dim(1) != T)
            throw std::invalid_argument("stack_segments: inconsistent segment shapes");
        v.insert(v.end(), s.data().begin(), s.data().end());
    }
    return Tensor({B, 1, F, T}, std::move(v));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "DTDYNET-CKPT-V1";

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_ints(const std::vector<std::int64_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<std::int64_t> split_ints(const std::string& s) {
    std::vector<std::int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
    return out;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    os << name << " " << t.rank();
    for (std::int64_t d = 0; d < t.rank(); ++d) os << " " << t.dim(d);
    os << "\n";
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    os << "\n";
}

std::pair<std::string, Tensor> read_tensor(std::istream& is, const std::string& path) {
    std::string line;
    if (!std::getline(is, line)) throw io_error("truncated checkpoint: " + path);
    std::istringstream hs(line);
    std::string name;
    std::int64_t rank = 0;
    hs >> name >> rank;
    if (!hs || rank < 0 || rank > 8) throw io_error("bad tensor header in checkpoint: " + path);
    Shape shape;
    for (std::int64_t d = 0; d < rank; ++d) {
        std::int64_t v = 0;
        hs >> v;
        shape.push_back(v);
    }
    if (!hs) throw io_error("bad tensor shape in checkpoint: " + path);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw io_error("truncated tensor data in checkpoint: " + path);
    is.get();  // trailing newline
    return {name, Tensor(shape, std::move(data))};
}

}  // namespace

Checkpoint snapshot(Model& m) {
    Checkpoint ck;
    ck.config = m.cfg;
    ck.n_classes = m.n_classes();
    for (auto& p : parameters(m)) ck.tensors.emplace_back(p.name, p.tensor);
    for (auto& b : buffers(m)) ck.tensors.emplace_back(b.name, b.tensor);
    return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
    Rng rng(0);  // values are overwritten below
    Model m = build_model(ck.config, rng);
    if (ck.n_classes > 0) attach_classifier(m, ck.n_classes);
    std::map<std::string, const Tensor*> have;
    for (const auto& [name, t] : ck.tensors) have[name] = &t;
    auto fill = [&](std::vector<NamedTensor> list) {
        for (auto& nt : list) {
            auto it = have.find(nt.name);
            if (it == have.end()) throw io_error("checkpoint missing tensor '" + nt.name + "'");
            if (it->second->shape() != nt.tensor.shape())
                throw io_error("checkpoint tensor '" + nt.name + "' has shape " + shape_str(it->second->shape()) +
                               ", expected " + shape_str(nt.tensor.shape()));
            nt.tensor.data() = it->second->data();
        }
    };
    fill(parameters(m));
    fill(buffers(m));
    return m;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot write checkpoint: " + path);
    os << kMagic << "\n";
    std::vector<std::pair<std::string, std::string>> kv = {
        {"width", fmt_double(ck.config.width_mult)},
        {"conv", to_string(ck.config.conv_kind)},
        {"r", fmt_double(ck.config.r)},
        {"basis", std::to_string(ck.config.basis_count)},
        {"pooling", to_string(ck.config.pooling)},
        {"emb_dim", std::to_string(ck.config.emb_dim)},
        {"blocks", join_ints(ck.config.stage_blocks)},
        {"mel_bins", std::to_string(ck.config.input_mel_bins)},
        {"n_classes", std::to_string(ck.n_classes)},
    };
    if (!ck.config.custom_channels.empty()) kv.emplace_back("channels", join_ints(ck.config.custom_channels));
    os << "config " << kv.size() << "\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    os << "tensors " << ck.tensors.size() << "\n";
    for (const auto& [name, t] : ck.tensors) write_tensor(os, name, t);
    if (ck.has_optim) {
        os << "optim " << ck.optim_step << " " << ck.next_epoch << " " << ck.optim_tensors.size() << "\n";
        for (const auto& [name, t] : ck.optim_tensors) write_tensor(os, name, t);
    }
    os << "end\n";
    if (!os) throw io_error("failed writing checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kMagic) throw io_error("not a checkpoint file: " + path);
    if (!std::getline(is, line) || line.rfind("config ", 0) != 0) throw io_error("missing config section: " + path);
    const auto nkeys = std::stoll(line.substr(7));
    std::map<std::string, std::string> kv;
    for (std::int64_t i = 0; i < nkeys; ++i) {
        if (!std::getline(is, line)) throw io_error("truncated config section: " + path);
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw io_error("malformed config line in checkpoint: " + path);
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    Checkpoint ck;
    ck.config.width_mult = std::stod(kv.at("width"));
    ck.config.conv_kind = conv_kind_from_string(kv.at("conv"));
    ck.config.r = std::stod(kv.at("r"));
    ck.config.basis_count = std::stoll(kv.at("basis"));
    ck.config.pooling = pooling_from_string(kv.at("pooling"));
    ck.config.emb_dim = std::stoll(kv.at("emb_dim"));
    ck.config.stage_blocks = split_ints(kv.at("blocks"));
    ck.config.input_mel_bins = std::stoll(kv.at("mel_bins"));
    ck.n_classes = std::stoll(kv.at("n_classes"));
    if (kv.count("channels")) ck.config.custom_channels = split_ints(kv.at("channels"));
    if (!std::getline(is, line) || line.rfind("tensors ", 0) != 0) throw io_error("missing tensors section: " + path);
    const auto ntensors = std::stoll(line.substr(8));
    for (std::int64_t i = 0; i < ntensors; ++i) ck.tensors.push_back(read_tensor(is, path));
    if (!std::getline(is, line)) throw io_error("truncated checkpoint: " + path);
    if (line.rfind("optim ", 0) == 0) {
        std::istringstream hs(line.substr(6));
        std::int64_t count = 0;
        hs >> ck.optim_step >> ck.next_epoch >> count;
        if (!hs) throw io_error("malformed optim header: " + path);
        ck.has_optim = true;
        for (std::int64_t i = 0; i < count; ++i) ck.optim_tensors.push_back(read_tensor(is, path));
        if (!std::getline(is, line)) throw io_error("truncated checkpoint: " + path);
    }
    if (line != "end") throw io_error("missing end marker: " + path);
    return ck;
}

}  // namespace dtdy
