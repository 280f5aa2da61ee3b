#include "conflictheads/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "conflictheads/rng.hpp"
#include "conflictheads/textio.hpp"

namespace conflictheads {

namespace {

// d/dx of exact gelu: Phi(x) + x * phi(x).
double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// Gradients of y = x.W + b: accumulates dW, db.
void linear_backward_params(const double* x, const double* dy, int rows, int d_in,
                            int d_out, double* dw, double* db) {
    for (int p = 0; p < rows; ++p) {
        const double* xp = x + static_cast<std::size_t>(p) * d_in;
        const double* dyp = dy + static_cast<std::size_t>(p) * d_out;
        for (int j = 0; j < d_out; ++j) db[j] += dyp[j];
        for (int i = 0; i < d_in; ++i) {
            const double a = xp[i];
            if (a == 0.0) continue;
            double* dwrow = dw + static_cast<std::size_t>(i) * d_out;
            for (int j = 0; j < d_out; ++j) dwrow[j] += a * dyp[j];
        }
    }
}

// dx += dy . W^T.
void linear_backward_input(const double* dy, const double* w, int rows, int d_in,
                           int d_out, double* dx) {
    for (int p = 0; p < rows; ++p) {
        const double* dyp = dy + static_cast<std::size_t>(p) * d_out;
        double* dxp = dx + static_cast<std::size_t>(p) * d_in;
        for (int i = 0; i < d_in; ++i) {
            const double* wrow = w + static_cast<std::size_t>(i) * d_out;
            double s = 0.0;
            for (int j = 0; j < d_out; ++j) s += wrow[j] * dyp[j];
            dxp[i] += s;
        }
    }
}

// Backward of out = gamma*xhat + beta where xhat = (x-mean)*rstd.
// Accumulates dgamma, dbeta and adds the input gradient into dx.
void layer_norm_backward(const double* da, const double* xhat, const double* rstd,
                         const double* gamma, int rows, int d, double* dgamma,
                         double* dbeta, double* dx) {
    for (int p = 0; p < rows; ++p) {
        const double* dap = da + static_cast<std::size_t>(p) * d;
        const double* xhp = xhat + static_cast<std::size_t>(p) * d;
        double* dxp = dx + static_cast<std::size_t>(p) * d;
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            dgamma[j] += dap[j] * xhp[j];
            dbeta[j] += dap[j];
            const double dxh = dap[j] * gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhp[j];
        }
        const double m1 = sum_dxhat / d;
        const double m2 = sum_dxhat_xhat / d;
        const double r = rstd[p];
        for (int j = 0; j < d; ++j) {
            const double dxh = dap[j] * gamma[j];
            dxp[j] += r * (dxh - m1 - xhp[j] * m2);
        }
    }
}

// Recomputes gamma*xhat + beta (the layer-norm output the linears consumed).
void scale_shift(const double* xhat, const double* gamma, const double* beta, int rows,
                 int d, double* out) {
    for (int p = 0; p < rows; ++p) {
        const double* xhp = xhat + static_cast<std::size_t>(p) * d;
        double* op = out + static_cast<std::size_t>(p) * d;
        for (int j = 0; j < d; ++j) op[j] = gamma[j] * xhp[j] + beta[j];
    }
}

// Forward (with trace) + full backward; accumulates the item gradient into
// grad and returns the item loss.
double backward_into(const Weights& weights, const TokenSequence& input, TokenId target,
                     double* grad) {
    const ModelConfig& cfg = weights.config;
    const ParamLayout layout(cfg);

    detail::ForwardTrace tr;
    detail::forward_impl(weights, input, {}, nullptr, &tr, nullptr);

    if (target < 0 || target >= cfg.vocab_size) {
        throw InputError("loss: target token out of vocab");
    }

    const int seq = tr.seq_len;
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int nh = cfg.n_heads;
    const int dff = cfg.d_ff();
    const int vocab = cfg.vocab_size;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t sd = static_cast<std::size_t>(seq) * d;
    const auto ul = [](int x) { return static_cast<std::size_t>(x); };

    // Softmax cross-entropy at the last position.
    double max_logit = tr.logits[0];
    for (double x : tr.logits) max_logit = std::max(max_logit, x);
    double denom = 0.0;
    std::vector<double> dlogits(ul(vocab));
    for (int t = 0; t < vocab; ++t) {
        dlogits[ul(t)] = std::exp(tr.logits[ul(t)] - max_logit);
        denom += dlogits[ul(t)];
    }
    const double item_loss =
        std::log(denom) + max_logit - tr.logits[ul(static_cast<int>(target))];
    const double inv_denom = 1.0 / denom;
    for (int t = 0; t < vocab; ++t) dlogits[ul(t)] *= inv_denom;
    dlogits[ul(static_cast<int>(target))] -= 1.0;

    // Unembedding: logits = af . Wu + bu with af = gammaf*xhatf + betaf.
    std::vector<double> af(ul(d));
    scale_shift(tr.xhatf.data(), weights.block(layout.lnf_gamma),
                weights.block(layout.lnf_beta), 1, d, af.data());
    std::vector<double> daf(ul(d), 0.0);
    linear_backward_params(af.data(), dlogits.data(), 1, d, vocab,
                           grad + layout.w_unembed, grad + layout.b_unembed);
    linear_backward_input(dlogits.data(), weights.block(layout.w_unembed), 1, d, vocab,
                          daf.data());

    // Final layer norm feeds only the last position.
    std::vector<double> dh_res(sd, 0.0);
    layer_norm_backward(daf.data(), tr.xhatf.data(), &tr.rstdf,
                        weights.block(layout.lnf_gamma), 1, d, grad + layout.lnf_gamma,
                        grad + layout.lnf_beta, dh_res.data() + ul(seq - 1) * d);

    std::vector<double> a_buf(sd), dz(sd), da(sd), dc(ul(seq) * dff), dgelu(ul(seq) * dff);
    std::vector<double> dq(sd), dk(sd), dv(sd), d_mid(sd);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lo = layout.layers[ul(l)];
        const auto& xhat1 = tr.xhat1[ul(l)];
        const auto& xhat2 = tr.xhat2[ul(l)];

        // MLP: h_out = h_mid + gelu(a2.W1 + b1).W2 + b2; dh_res currently
        // holds d h_out and doubles as d h_mid through the residual.
        std::fill(dgelu.begin(), dgelu.end(), 0.0);
        linear_backward_params(tr.fc1_act[ul(l)].data(), dh_res.data(), seq, dff, d,
                               grad + lo.w_fc2, grad + lo.b_fc2);
        linear_backward_input(dh_res.data(), weights.block(lo.w_fc2), seq, dff, d,
                              dgelu.data());
        const auto& fc1_pre = tr.fc1_pre[ul(l)];
        for (std::size_t idx = 0; idx < dc.size(); ++idx) {
            dc[idx] = dgelu[idx] * gelu_grad(fc1_pre[idx]);
        }
        scale_shift(xhat2.data(), weights.block(lo.ln2_gamma), weights.block(lo.ln2_beta),
                    seq, d, a_buf.data());
        std::fill(da.begin(), da.end(), 0.0);
        linear_backward_params(a_buf.data(), dc.data(), seq, d, dff, grad + lo.w_fc1,
                               grad + lo.b_fc1);
        linear_backward_input(dc.data(), weights.block(lo.w_fc1), seq, d, dff, da.data());
        layer_norm_backward(da.data(), xhat2.data(), tr.rstd2[ul(l)].data(),
                            weights.block(lo.ln2_gamma), seq, d, grad + lo.ln2_gamma,
                            grad + lo.ln2_beta, dh_res.data());

        // Attention output projection: h_mid = h_in + z.Wo + bo.
        d_mid = dh_res;
        std::fill(dz.begin(), dz.end(), 0.0);
        linear_backward_params(tr.z[ul(l)].data(), d_mid.data(), seq, d, d, grad + lo.w_o,
                               grad + lo.b_o);
        linear_backward_input(d_mid.data(), weights.block(lo.w_o), seq, d, d, dz.data());

        // Per-head softmax attention backward.
        const auto& q = tr.q[ul(l)];
        const auto& k = tr.k[ul(l)];
        const auto& v = tr.v[ul(l)];
        const auto& att = tr.att[ul(l)];
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> ds_row(ul(seq));
        for (int i = 0; i < nh; ++i) {
            const int col = i * dh;
            const double* att_head = att.data() + ul(i) * seq * seq;
            for (int p = 0; p < seq; ++p) {
                const double* arow = att_head + ul(p) * seq;
                const double* dzp = dz.data() + ul(p) * d + col;
                // datt[u] = dz.v[u]; dv[u] += att[u]*dz.
                double dot = 0.0;
                for (int u = 0; u <= p; ++u) {
                    const double* vu = v.data() + ul(u) * d + col;
                    double datt = 0.0;
                    double* dvu = dv.data() + ul(u) * d + col;
                    const double a = arow[u];
                    for (int j = 0; j < dh; ++j) {
                        datt += dzp[j] * vu[j];
                        dvu[j] += a * dzp[j];
                    }
                    ds_row[ul(u)] = datt;
                    dot += a * datt;
                }
                const double* qp = q.data() + ul(p) * d + col;
                double* dqp = dq.data() + ul(p) * d + col;
                for (int u = 0; u <= p; ++u) {
                    const double ds = arow[u] * (ds_row[ul(u)] - dot) * att_scale;
                    if (ds == 0.0) continue;
                    const double* ku = k.data() + ul(u) * d + col;
                    double* dku = dk.data() + ul(u) * d + col;
                    for (int j = 0; j < dh; ++j) {
                        dqp[j] += ds * ku[j];
                        dku[j] += ds * qp[j];
                    }
                }
            }
        }

        // Q/K/V projections share the layer-norm output a1.
        scale_shift(xhat1.data(), weights.block(lo.ln1_gamma), weights.block(lo.ln1_beta),
                    seq, d, a_buf.data());
        std::fill(da.begin(), da.end(), 0.0);
        linear_backward_params(a_buf.data(), dq.data(), seq, d, d, grad + lo.w_q,
                               grad + lo.b_q);
        linear_backward_input(dq.data(), weights.block(lo.w_q), seq, d, d, da.data());
        linear_backward_params(a_buf.data(), dk.data(), seq, d, d, grad + lo.w_k,
                               grad + lo.b_k);
        linear_backward_input(dk.data(), weights.block(lo.w_k), seq, d, d, da.data());
        linear_backward_params(a_buf.data(), dv.data(), seq, d, d, grad + lo.w_v,
                               grad + lo.b_v);
        linear_backward_input(dv.data(), weights.block(lo.w_v), seq, d, d, da.data());

        // Residual: d h_in = d h_mid + layer-norm path.
        dh_res = d_mid;
        layer_norm_backward(da.data(), xhat1.data(), tr.rstd1[ul(l)].data(),
                            weights.block(lo.ln1_gamma), seq, d, grad + lo.ln1_gamma,
                            grad + lo.ln1_beta, dh_res.data());
    }

    // Embeddings.
    for (int p = 0; p < seq; ++p) {
        const TokenId t = input.tokens[ul(p)];
        const double* g = dh_res.data() + ul(p) * d;
        double* gt = grad + layout.tok_embed + ul(static_cast<int>(t)) * d;
        double* gp = grad + layout.pos_embed + ul(p) * d;
        for (int j = 0; j < d; ++j) {
            gt[j] += g[j];
            gp[j] += g[j];
        }
    }
    return item_loss;
}

struct EvalStats {
    double clean_accuracy = 0.0;
    double hallucination_rate = 0.0;
};

EvalStats evaluate(const Weights& weights, const Dataset& data,
                   const std::vector<std::uint64_t>& ids) {
    EvalStats stats;
    if (ids.empty()) return stats;
    int clean_hits = 0;
    int hall_hits = 0;
    for (std::uint64_t id : ids) {
        const ConflictSample& s = data.by_id(id);
        const TokenSequence clean_in =
            make_input(weights.config, data.task, s.scene, s.clean_query);
        const TokenSequence conflict_in =
            make_input(weights.config, data.task, s.scene, s.conflict_query);
        if (generate_answer(weights, clean_in) == s.y_f) ++clean_hits;
        if (generate_answer(weights, conflict_in) == s.y_h) ++hall_hits;
    }
    stats.clean_accuracy = static_cast<double>(clean_hits) / static_cast<double>(ids.size());
    stats.hallucination_rate =
        static_cast<double>(hall_hits) / static_cast<double>(ids.size());
    return stats;
}

}  // namespace

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("TrainConfig: learning_rate must be > 0");
    if (bias_mix < 0.0 || bias_mix > 1.0) {
        throw ConfigError("TrainConfig: bias_mix must lie in [0,1]");
    }
    if (eval_every < 1) throw ConfigError("TrainConfig: eval_every must be >= 1");
}

double loss(std::span<const double> logits, TokenId target) {
    if (logits.empty()) throw InputError("loss: empty logits");
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw InputError("loss: target token out of vocab");
    }
    double max_logit = logits[0];
    for (double x : logits) max_logit = std::max(max_logit, x);
    double denom = 0.0;
    for (double x : logits) denom += std::exp(x - max_logit);
    return std::log(denom) + max_logit - logits[static_cast<std::size_t>(target)];
}

std::vector<double> item_gradient(const Weights& weights, const TokenSequence& input,
                                  TokenId target, double* loss_out) {
    const ParamLayout layout(weights.config);
    std::vector<double> grad(layout.total, 0.0);
    const double l = backward_into(weights, input, target, grad.data());
    if (loss_out != nullptr) *loss_out = l;
    return grad;
}

double grad_check(const Weights& weights, const TokenSequence& input, TokenId target,
                  double epsilon, int n_sampled, std::uint64_t seed) {
    if (epsilon < 1e-7 || epsilon > 1e-3) {
        throw InputError("grad_check: epsilon must lie in [1e-7, 1e-3]");
    }
    if (n_sampled < 1) throw InputError("grad_check: n_sampled must be >= 1");

    const std::vector<double> analytic = item_gradient(weights, input, target);
    for (double g : analytic) {
        if (!std::isfinite(g)) throw NumericError("grad_check: non-finite gradient");
    }

    Rng rng(derive_seed(seed, 5));
    Weights probe = weights;
    double worst = 0.0;
    for (int s = 0; s < n_sampled; ++s) {
        const std::size_t idx = rng.uniform_index(probe.params.size());
        const double saved = probe.params[idx];

        probe.params[idx] = saved + epsilon;
        std::vector<double> logits;
        detail::forward_impl(probe, input, {}, nullptr, nullptr, &logits);
        const double up = loss(logits, target);

        probe.params[idx] = saved - epsilon;
        detail::forward_impl(probe, input, {}, nullptr, nullptr, &logits);
        const double down = loss(logits, target);

        probe.params[idx] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double a = analytic[idx];
        const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

TrainResult train(const Weights& initial, const Dataset& data, const TrainConfig& config) {
    config.validate();
    if (data.samples.empty()) throw InputError("train: dataset is empty");

    std::vector<std::uint64_t> pool;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (is_training_tag(data.tags[i])) pool.push_back(data.samples[i].id);
    }
    if (pool.empty()) {
        // Untagged datasets train on everything.
        for (const auto& s : data.samples) pool.push_back(s.id);
    }
    std::vector<std::uint64_t> eval_ids = data.ids_with_tag(SplitTag::kValidation);
    if (eval_ids.empty()) eval_ids = pool;

    TrainResult result;
    result.weights = initial;
    Weights& w = result.weights;
    const ParamLayout layout(w.config);
    if (w.params.size() != layout.total) {
        throw ConfigError("train: parameter vector size does not match config");
    }

    Rng rng(derive_seed(config.seed, 4));
    std::vector<double> grad(layout.total);
    EvalStats stats = evaluate(w, data, eval_ids);
    result.curve.reserve(static_cast<std::size_t>(config.steps));

    for (int step = 1; step <= config.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < config.batch_size; ++b) {
            const ConflictSample& s = data.by_id(pool[rng.uniform_index(pool.size())]);
            const bool clean_item = rng.unit_double() < 0.5;
            TokenId target = s.y_f;
            const std::vector<TokenId>* query = &s.clean_query;
            if (!clean_item) {
                query = &s.conflict_query;
                if (rng.unit_double() < config.bias_mix) target = s.y_h;
            }
            const TokenSequence input = make_input(w.config, data.task, s.scene, *query);
            batch_loss += backward_into(w, input, target, grad.data());
        }
        batch_loss /= config.batch_size;
        if (!std::isfinite(batch_loss)) {
            throw NumericError("train: loss diverged at step " + std::to_string(step));
        }
        const double scale = config.learning_rate / config.batch_size;
        for (std::size_t i = 0; i < grad.size(); ++i) w.params[i] -= scale * grad[i];

        if (step % config.eval_every == 0 || step == config.steps) {
            stats = evaluate(w, data, eval_ids);
        }
        result.curve.push_back(
            {step, batch_loss, stats.clean_accuracy, stats.hallucination_rate});
    }
    return result;
}

void save_curve(const std::string& path, const std::vector<CurvePoint>& curve) {
    std::ostringstream out;
    out << "step,loss,clean_accuracy,hallucination_rate\n";
    for (const auto& p : curve) {
        out << p.step << ',' << format_double(p.loss) << ',' << format_double(p.clean_accuracy)
            << ',' << format_double(p.hallucination_rate) << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<CurvePoint> load_curve(const std::string& path) {
    const std::string content = read_text_file(path);
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line) || trim(line) != "step,loss,clean_accuracy,hallucination_rate") {
        throw IoError("not a training-curve file: " + path);
    }
    std::vector<CurvePoint> curve;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto fields = split_string(line, ',');
        if (fields.size() != 4) throw IoError("malformed curve row: " + line);
        CurvePoint p;
        p.step = static_cast<int>(parse_int(fields[0]));
        p.loss = parse_double(fields[1]);
        p.clean_accuracy = parse_double(fields[2]);
        p.hallucination_rate = parse_double(fields[3]);
        curve.push_back(p);
    }
    return curve;
}

}  // namespace conflictheads
