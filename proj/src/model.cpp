#include "conflictheads/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "conflictheads/rng.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

namespace {

constexpr double kLnEps = 1e-5;

// y[p] = x[p] . W + b for p in [0, rows). W is [d_in][d_out] row-major.
void linear(const double* x, int rows, int d_in, const double* w,
            const double* b, int d_out, double* y) {
    for (int p = 0; p < rows; ++p) {
        double* yp = y + static_cast<std::size_t>(p) * d_out;
        if (b != nullptr) {
            std::memcpy(yp, b, sizeof(double) * static_cast<std::size_t>(d_out));
        } else {
            std::fill(yp, yp + d_out, 0.0);
        }
        const double* xp = x + static_cast<std::size_t>(p) * d_in;
        for (int kk = 0; kk < d_in; ++kk) {
            const double a = xp[kk];
            const double* wrow = w + static_cast<std::size_t>(kk) * d_out;
            for (int j = 0; j < d_out; ++j) yp[j] += a * wrow[j];
        }
    }
}

// Normalizes each row of x; writes gamma*xhat+beta into out and keeps xhat
// and 1/std for the backward pass.
void layer_norm(const double* x, int rows, int d, const double* gamma,
                const double* beta, double* out, double* xhat, double* rstd) {
    for (int p = 0; p < rows; ++p) {
        const double* xp = x + static_cast<std::size_t>(p) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xp[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xp[j] - mean;
            var += c * c;
        }
        var /= d;
        const double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[p] = r;
        double* xhp = xhat + static_cast<std::size_t>(p) * d;
        double* op = out + static_cast<std::size_t>(p) * d;
        for (int j = 0; j < d; ++j) {
            const double h = (xp[j] - mean) * r;
            xhp[j] = h;
            op[j] = gamma[j] * h + beta[j];
        }
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("ModelConfig: n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("ModelConfig: n_heads must be >= 1");
    if (d_model < 1 || d_head < 1) throw ConfigError("ModelConfig: widths must be >= 1");
    if (d_model != n_heads * d_head) {
        throw ConfigError("ModelConfig: d_model must equal n_heads * d_head");
    }
    if (vocab_size < 2) throw ConfigError("ModelConfig: vocab_size must be >= 2");
    if (max_seq < 1) throw ConfigError("ModelConfig: max_seq must be >= 1");
    if (n_visual_tokens < 0 || n_visual_tokens > max_seq) {
        throw ConfigError("ModelConfig: n_visual_tokens out of range");
    }
}

std::string ModelConfig::canonical_string() const {
    std::ostringstream ss;
    ss << "n_layers=" << n_layers << " n_heads=" << n_heads
       << " d_model=" << d_model << " d_head=" << d_head
       << " vocab_size=" << vocab_size << " max_seq=" << max_seq
       << " n_visual_tokens=" << n_visual_tokens;
    return ss.str();
}

std::string to_string(HeadId id) {
    return "(" + std::to_string(id.layer) + "," + std::to_string(id.head) + ")";
}

TokenSequence embed_multimodal(const ModelConfig& config,
                               std::span<const TokenId> scene_tokens,
                               std::span<const TokenId> query_tokens) {
    if (static_cast<int>(scene_tokens.size()) != config.n_visual_tokens) {
        throw InputError("embed_multimodal: scene token count must equal n_visual_tokens");
    }
    const std::size_t total = scene_tokens.size() + query_tokens.size();
    if (total > static_cast<std::size_t>(config.max_seq)) {
        throw InputError("embed_multimodal: sequence exceeds max_seq");
    }
    TokenSequence seq;
    seq.tokens.reserve(total);
    seq.is_visual.reserve(total);
    for (TokenId t : scene_tokens) {
        seq.tokens.push_back(t);
        seq.is_visual.push_back(1);
    }
    for (TokenId t : query_tokens) {
        seq.tokens.push_back(t);
        seq.is_visual.push_back(0);
    }
    return seq;
}

ActivationCache::ActivationCache(const ModelConfig& config, int seq_len)
    : n_layers_(config.n_layers),
      n_heads_(config.n_heads),
      d_head_(config.d_head),
      seq_len_(seq_len),
      data_(static_cast<std::size_t>(config.n_layers) * config.n_heads * seq_len *
            config.d_head) {}

void ActivationCache::check_head(HeadId id) const {
    if (id.layer < 0 || id.layer >= n_layers_ || id.head < 0 || id.head >= n_heads_) {
        throw ConfigError("ActivationCache: head " + to_string(id) + " out of range");
    }
}

std::span<const double> ActivationCache::at(HeadId id, int position) const {
    check_head(id);
    if (position < 0 || position >= seq_len_) {
        throw InputError("ActivationCache: position out of range");
    }
    const std::size_t idx =
        ((static_cast<std::size_t>(id.layer) * n_heads_ + id.head) * seq_len_ + position) *
        d_head_;
    return {data_.data() + idx, static_cast<std::size_t>(d_head_)};
}

std::span<double> ActivationCache::mutable_row(HeadId id, int position) {
    const std::size_t idx =
        ((static_cast<std::size_t>(id.layer) * n_heads_ + id.head) * seq_len_ + position) *
        d_head_;
    return {data_.data() + idx, static_cast<std::size_t>(d_head_)};
}

ParamLayout::ParamLayout(const ModelConfig& config) {
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto dff = static_cast<std::size_t>(config.d_ff());
    const auto v = static_cast<std::size_t>(config.vocab_size);
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
        const std::size_t at = off;
        off += n;
        return at;
    };
    tok_embed = take(v * d);
    pos_embed = take(static_cast<std::size_t>(config.max_seq) * d);
    layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& l : layers) {
        l.ln1_gamma = take(d);
        l.ln1_beta = take(d);
        l.w_q = take(d * d);
        l.b_q = take(d);
        l.w_k = take(d * d);
        l.b_k = take(d);
        l.w_v = take(d * d);
        l.b_v = take(d);
        l.w_o = take(d * d);
        l.b_o = take(d);
        l.ln2_gamma = take(d);
        l.ln2_beta = take(d);
        l.w_fc1 = take(d * dff);
        l.b_fc1 = take(dff);
        l.w_fc2 = take(dff * d);
        l.b_fc2 = take(d);
    }
    lnf_gamma = take(d);
    lnf_beta = take(d);
    w_unembed = take(d * v);
    b_unembed = take(v);
    total = off;
}

Weights init_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const ParamLayout layout(config);
    Weights w;
    w.config = config;
    w.params.assign(layout.total, 0.0);
    Rng rng(derive_seed(seed, 1));

    auto fill_uniform = [&](std::size_t offset, std::size_t count, double amplitude) {
        for (std::size_t i = 0; i < count; ++i) {
            w.params[offset + i] = rng.symmetric(amplitude);
        }
    };
    auto glorot = [&](std::size_t offset, int fan_in, int fan_out) {
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        fill_uniform(offset, static_cast<std::size_t>(fan_in) * fan_out, a);
    };

    const int d = config.d_model;
    const int dff = config.d_ff();
    fill_uniform(layout.tok_embed, static_cast<std::size_t>(config.vocab_size) * d, 0.05);
    fill_uniform(layout.pos_embed, static_cast<std::size_t>(config.max_seq) * d, 0.05);
    for (const auto& l : layout.layers) {
        std::fill_n(w.params.begin() + static_cast<std::ptrdiff_t>(l.ln1_gamma), d, 1.0);
        glorot(l.w_q, d, d);
        glorot(l.w_k, d, d);
        glorot(l.w_v, d, d);
        glorot(l.w_o, d, d);
        std::fill_n(w.params.begin() + static_cast<std::ptrdiff_t>(l.ln2_gamma), d, 1.0);
        glorot(l.w_fc1, d, dff);
        glorot(l.w_fc2, dff, d);
    }
    std::fill_n(w.params.begin() + static_cast<std::ptrdiff_t>(layout.lnf_gamma), d, 1.0);
    glorot(layout.w_unembed, d, config.vocab_size);
    return w;
}

namespace detail {

void validate_plan(const ModelConfig& config, const OverridePlan& plan, int seq_len) {
    std::set<std::pair<int, int>> seen;
    for (const auto& op : plan.ops) {
        if (op.head.layer < 0 || op.head.layer >= config.n_layers || op.head.head < 0 ||
            op.head.head >= config.n_heads) {
            throw ConfigError("OverridePlan: head " + to_string(op.head) + " out of range");
        }
        if (!seen.insert({op.head.layer, op.head.head}).second) {
            throw ConfigError("OverridePlan: duplicate action for head " + to_string(op.head));
        }
        if (op.action == OverrideAction::kReplace) {
            const std::size_t want =
                op.scope == PositionScope::kLastToken
                    ? static_cast<std::size_t>(config.d_head)
                    : static_cast<std::size_t>(seq_len) * config.d_head;
            if (op.values.size() != want) {
                throw ConfigError("OverridePlan: replacement for head " + to_string(op.head) +
                                  " has " + std::to_string(op.values.size()) +
                                  " values, expected " + std::to_string(want));
            }
        }
    }
}

void forward_impl(const Weights& weights, const TokenSequence& input,
                  const OverridePlan& plan, ActivationCache* cache,
                  ForwardTrace* trace, std::vector<double>* logits_out) {
    const ModelConfig& cfg = weights.config;
    cfg.validate();
    const ParamLayout layout(cfg);
    if (weights.params.size() != layout.total) {
        throw ConfigError("forward: parameter vector size does not match config");
    }

    const int seq = input.length();
    if (seq < 1) throw InputError("forward: empty input");
    if (seq > cfg.max_seq) throw InputError("forward: sequence exceeds max_seq");
    if (input.is_visual.size() != input.tokens.size()) {
        throw InputError("forward: modality mask length mismatch");
    }
    bool seen_text = false;
    for (int p = 0; p < seq; ++p) {
        const TokenId t = input.tokens[static_cast<std::size_t>(p)];
        if (t < 0 || t >= cfg.vocab_size) throw InputError("forward: token id out of vocab");
        if (input.is_visual[static_cast<std::size_t>(p)]) {
            if (seen_text) throw InputError("forward: visual token after text token");
        } else {
            seen_text = true;
        }
    }
    validate_plan(cfg, plan, seq);

    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int nh = cfg.n_heads;
    const int dff = cfg.d_ff();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t sd = static_cast<std::size_t>(seq) * d;

    if (trace != nullptr) {
        trace->seq_len = seq;
        auto resize_per_layer = [&](std::vector<std::vector<double>>& vv, std::size_t n) {
            vv.assign(static_cast<std::size_t>(cfg.n_layers), std::vector<double>(n));
        };
        trace->h0.assign(sd, 0.0);
        resize_per_layer(trace->xhat1, sd);
        resize_per_layer(trace->rstd1, static_cast<std::size_t>(seq));
        resize_per_layer(trace->q, sd);
        resize_per_layer(trace->k, sd);
        resize_per_layer(trace->v, sd);
        resize_per_layer(trace->att,
                         static_cast<std::size_t>(nh) * seq * seq);
        resize_per_layer(trace->z, sd);
        resize_per_layer(trace->h_mid, sd);
        resize_per_layer(trace->xhat2, sd);
        resize_per_layer(trace->rstd2, static_cast<std::size_t>(seq));
        resize_per_layer(trace->fc1_pre, static_cast<std::size_t>(seq) * dff);
        resize_per_layer(trace->fc1_act, static_cast<std::size_t>(seq) * dff);
        resize_per_layer(trace->h_out, sd);
        trace->xhatf.assign(static_cast<std::size_t>(d), 0.0);
        trace->logits.assign(static_cast<std::size_t>(cfg.vocab_size), 0.0);
    }

    std::vector<double> h(sd);
    const double* tok = weights.block(layout.tok_embed);
    const double* pos = weights.block(layout.pos_embed);
    for (int p = 0; p < seq; ++p) {
        const TokenId t = input.tokens[static_cast<std::size_t>(p)];
        double* hp = h.data() + static_cast<std::size_t>(p) * d;
        const double* te = tok + static_cast<std::size_t>(t) * d;
        const double* pe = pos + static_cast<std::size_t>(p) * d;
        for (int j = 0; j < d; ++j) hp[j] = te[j] + pe[j];
    }
    if (trace != nullptr) trace->h0 = h;

    std::vector<double> ln_out(sd), xhat(sd), rstd(static_cast<std::size_t>(seq));
    std::vector<double> q(sd), k(sd), v(sd), z(sd), attn_out(sd);
    std::vector<double> att(static_cast<std::size_t>(nh) * seq * seq, 0.0);
    std::vector<double> fc1_pre(static_cast<std::size_t>(seq) * dff);
    std::vector<double> fc1_act(static_cast<std::size_t>(seq) * dff);
    std::vector<double> fc2_out(sd);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lo = layout.layers[static_cast<std::size_t>(l)];

        layer_norm(h.data(), seq, d, weights.block(lo.ln1_gamma), weights.block(lo.ln1_beta),
                   ln_out.data(), xhat.data(), rstd.data());
        if (trace != nullptr) {
            trace->xhat1[static_cast<std::size_t>(l)] = xhat;
            trace->rstd1[static_cast<std::size_t>(l)] = rstd;
        }

        linear(ln_out.data(), seq, d, weights.block(lo.w_q), weights.block(lo.b_q), d, q.data());
        linear(ln_out.data(), seq, d, weights.block(lo.w_k), weights.block(lo.b_k), d, k.data());
        linear(ln_out.data(), seq, d, weights.block(lo.w_v), weights.block(lo.b_v), d, v.data());

        std::fill(att.begin(), att.end(), 0.0);
        for (int i = 0; i < nh; ++i) {
            const int col = i * dh;
            double* att_head = att.data() + static_cast<std::size_t>(i) * seq * seq;
            for (int p = 0; p < seq; ++p) {
                double* row = att_head + static_cast<std::size_t>(p) * seq;
                const double* qp = q.data() + static_cast<std::size_t>(p) * d + col;
                double row_max = -1e300;
                for (int pp = 0; pp <= p; ++pp) {
                    const double* kp = k.data() + static_cast<std::size_t>(pp) * d + col;
                    double s = 0.0;
                    for (int j = 0; j < dh; ++j) s += qp[j] * kp[j];
                    s *= att_scale;
                    row[pp] = s;
                    row_max = std::max(row_max, s);
                }
                double denom = 0.0;
                for (int pp = 0; pp <= p; ++pp) {
                    row[pp] = std::exp(row[pp] - row_max);
                    denom += row[pp];
                }
                const double inv = 1.0 / denom;
                double* zp = z.data() + static_cast<std::size_t>(p) * d + col;
                std::fill(zp, zp + dh, 0.0);
                for (int pp = 0; pp <= p; ++pp) {
                    row[pp] *= inv;
                    const double a = row[pp];
                    const double* vp = v.data() + static_cast<std::size_t>(pp) * d + col;
                    for (int j = 0; j < dh; ++j) zp[j] += a * vp[j];
                }
            }
        }

        // Per-head overrides cut in at the pre-projection head output.
        for (const auto& op : plan.ops) {
            if (op.head.layer != l) continue;
            const int col = op.head.head * dh;
            const int p_begin = op.scope == PositionScope::kLastToken ? seq - 1 : 0;
            for (int p = p_begin; p < seq; ++p) {
                double* zp = z.data() + static_cast<std::size_t>(p) * d + col;
                if (op.action == OverrideAction::kZero) {
                    std::fill(zp, zp + dh, 0.0);
                } else {
                    const double* src =
                        op.scope == PositionScope::kLastToken
                            ? op.values.data()
                            : op.values.data() + static_cast<std::size_t>(p) * dh;
                    std::copy(src, src + dh, zp);
                }
            }
        }

        if (cache != nullptr) {
            for (int i = 0; i < nh; ++i) {
                const int col = i * dh;
                for (int p = 0; p < seq; ++p) {
                    auto row = cache->mutable_row({l, i}, p);
                    const double* zp = z.data() + static_cast<std::size_t>(p) * d + col;
                    std::copy(zp, zp + dh, row.begin());
                }
            }
        }
        if (trace != nullptr) {
            trace->q[static_cast<std::size_t>(l)] = q;
            trace->k[static_cast<std::size_t>(l)] = k;
            trace->v[static_cast<std::size_t>(l)] = v;
            trace->att[static_cast<std::size_t>(l)] = att;
            trace->z[static_cast<std::size_t>(l)] = z;
        }

        linear(z.data(), seq, d, weights.block(lo.w_o), weights.block(lo.b_o), d,
               attn_out.data());
        for (std::size_t idx = 0; idx < sd; ++idx) h[idx] += attn_out[idx];
        if (trace != nullptr) trace->h_mid[static_cast<std::size_t>(l)] = h;

        layer_norm(h.data(), seq, d, weights.block(lo.ln2_gamma), weights.block(lo.ln2_beta),
                   ln_out.data(), xhat.data(), rstd.data());
        if (trace != nullptr) {
            trace->xhat2[static_cast<std::size_t>(l)] = xhat;
            trace->rstd2[static_cast<std::size_t>(l)] = rstd;
        }
        linear(ln_out.data(), seq, d, weights.block(lo.w_fc1), weights.block(lo.b_fc1), dff,
               fc1_pre.data());
        for (std::size_t idx = 0; idx < fc1_pre.size(); ++idx) {
            fc1_act[idx] = gelu(fc1_pre[idx]);
        }
        linear(fc1_act.data(), seq, dff, weights.block(lo.w_fc2), weights.block(lo.b_fc2), d,
               fc2_out.data());
        for (std::size_t idx = 0; idx < sd; ++idx) h[idx] += fc2_out[idx];
        if (trace != nullptr) {
            trace->fc1_pre[static_cast<std::size_t>(l)] = fc1_pre;
            trace->fc1_act[static_cast<std::size_t>(l)] = fc1_act;
            trace->h_out[static_cast<std::size_t>(l)] = h;
        }
    }

    // Final norm and unembedding at the last position only.
    const double* h_last = h.data() + static_cast<std::size_t>(seq - 1) * d;
    std::vector<double> xf(static_cast<std::size_t>(d)), xh(static_cast<std::size_t>(d));
    double rf = 0.0;
    layer_norm(h_last, 1, d, weights.block(layout.lnf_gamma), weights.block(layout.lnf_beta),
               xf.data(), xh.data(), &rf);
    std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
    linear(xf.data(), 1, d, weights.block(layout.w_unembed), weights.block(layout.b_unembed),
           cfg.vocab_size, logits.data());

    if (trace != nullptr) {
        trace->xhatf = xh;
        trace->rstdf = rf;
        trace->logits = logits;
    }
    if (logits_out != nullptr) *logits_out = std::move(logits);
}

}  // namespace detail

ForwardResult forward(const Weights& weights, const TokenSequence& input,
                      const OverridePlan& plan) {
    ForwardResult result;
    result.cache = ActivationCache(weights.config, input.length());
    detail::forward_impl(weights, input, plan, &result.cache, nullptr, &result.logits);
    return result;
}

TokenId generate_answer(const Weights& weights, const TokenSequence& input,
                        const OverridePlan& plan) {
    std::vector<double> logits;
    detail::forward_impl(weights, input, plan, nullptr, nullptr, &logits);
    TokenId best = 0;
    for (TokenId t = 1; t < static_cast<TokenId>(logits.size()); ++t) {
        if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(best)]) {
            best = t;
        }
    }
    return best;
}

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'H', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Weights& weights,
                     const std::string& config_hash) {
    if (config_hash.size() != 16) {
        throw InputError("save_checkpoint: config hash must be 16 hex chars");
    }
    const ParamLayout layout(weights.config);
    if (weights.params.size() != layout.total) {
        throw ConfigError("save_checkpoint: parameter count mismatch");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    auto put_u32 = [&out](std::uint32_t x) {
        out.write(reinterpret_cast<const char*>(&x), sizeof(x));
    };
    auto put_i32 = [&out](std::int32_t x) {
        out.write(reinterpret_cast<const char*>(&x), sizeof(x));
    };
    put_u32(kCheckpointVersion);
    const ModelConfig& c = weights.config;
    put_i32(c.n_layers);
    put_i32(c.n_heads);
    put_i32(c.d_model);
    put_i32(c.d_head);
    put_i32(c.vocab_size);
    put_i32(c.max_seq);
    put_i32(c.n_visual_tokens);
    out.write(config_hash.data(), 16);
    const std::uint64_t count = weights.params.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(weights.params.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint for reading: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    auto get_u32 = [&in]() {
        std::uint32_t x = 0;
        in.read(reinterpret_cast<char*>(&x), sizeof(x));
        return x;
    };
    auto get_i32 = [&in]() {
        std::int32_t x = 0;
        in.read(reinterpret_cast<char*>(&x), sizeof(x));
        return x;
    };
    const std::uint32_t version = get_u32();
    if (version != kCheckpointVersion) {
        throw IoError("unsupported checkpoint format version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ModelConfig& c = ckpt.weights.config;
    c.n_layers = get_i32();
    c.n_heads = get_i32();
    c.d_model = get_i32();
    c.d_head = get_i32();
    c.vocab_size = get_i32();
    c.max_seq = get_i32();
    c.n_visual_tokens = get_i32();
    char hash[16];
    in.read(hash, 16);
    ckpt.config_hash.assign(hash, 16);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    c.validate();
    const ParamLayout layout(c);
    if (count != layout.total) {
        throw IoError("checkpoint parameter count does not match its config");
    }
    ckpt.weights.params.resize(count);
    in.read(reinterpret_cast<char*>(ckpt.weights.params.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint payload: " + path);
    return ckpt;
}

}  // namespace conflictheads
