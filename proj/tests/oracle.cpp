#include "oracle.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

namespace {

using conflictheads::HeadId;
using conflictheads::ModelConfig;
using conflictheads::ParamLayout;
using conflictheads::PatchSample;
using conflictheads::PositionScope;
using conflictheads::TokenSequence;
using conflictheads::Weights;

using Row = std::vector<double>;
using Matrix = std::vector<Row>;  // one row per position

Row layer_norm_row(const Row& x, const double* gamma, const double* beta) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    Row out(d);
    for (std::size_t j = 0; j < d; ++j) {
        out[j] = gamma[j] * ((x[j] - mean) * rstd) + beta[j];
    }
    return out;
}

// y = x * W + b with W row-major [d_in][d_out].
Row affine(const Row& x, const double* w, const double* b, std::size_t d_out) {
    Row out(b, b + d_out);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double* wrow = w + i * d_out;
        for (std::size_t j = 0; j < d_out; ++j) out[j] += xi * wrow[j];
    }
    return out;
}

double gelu_exact(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Runs the whole model; optionally captures one head's z rows and applies
// splices. Returns the last-position logits.
Row run(const Weights& weights, const TokenSequence& input,
        const std::vector<Splice>& splices, const HeadId* capture, Matrix* captured) {
    const ModelConfig& cfg = weights.config;
    const ParamLayout layout(cfg);
    const int seq = input.length();
    const int d = cfg.d_model;
    const int dh = cfg.d_head;

    Matrix x(static_cast<std::size_t>(seq));
    for (int p = 0; p < seq; ++p) {
        const double* te = weights.block(layout.tok_embed) +
                           static_cast<std::size_t>(input.tokens[static_cast<std::size_t>(p)]) * d;
        const double* pe = weights.block(layout.pos_embed) + static_cast<std::size_t>(p) * d;
        Row row(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = te[j] + pe[j];
        x[static_cast<std::size_t>(p)] = std::move(row);
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lo = layout.layers[static_cast<std::size_t>(l)];

        Matrix normed(static_cast<std::size_t>(seq));
        for (int p = 0; p < seq; ++p) {
            normed[static_cast<std::size_t>(p)] =
                layer_norm_row(x[static_cast<std::size_t>(p)], weights.block(lo.ln1_gamma),
                               weights.block(lo.ln1_beta));
        }

        Matrix q(static_cast<std::size_t>(seq)), k(static_cast<std::size_t>(seq)),
            v(static_cast<std::size_t>(seq));
        for (int p = 0; p < seq; ++p) {
            const Row& n = normed[static_cast<std::size_t>(p)];
            q[static_cast<std::size_t>(p)] =
                affine(n, weights.block(lo.w_q), weights.block(lo.b_q),
                       static_cast<std::size_t>(d));
            k[static_cast<std::size_t>(p)] =
                affine(n, weights.block(lo.w_k), weights.block(lo.b_k),
                       static_cast<std::size_t>(d));
            v[static_cast<std::size_t>(p)] =
                affine(n, weights.block(lo.w_v), weights.block(lo.b_v),
                       static_cast<std::size_t>(d));
        }

        // z[p] holds the concatenated per-head outputs.
        Matrix z(static_cast<std::size_t>(seq), Row(static_cast<std::size_t>(d), 0.0));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::size_t col = static_cast<std::size_t>(h) * dh;
            for (int p = 0; p < seq; ++p) {
                // Scaled dot-product scores over positions 0..p.
                Row scores(static_cast<std::size_t>(p) + 1, 0.0);
                double top = -1e300;
                for (int t = 0; t <= p; ++t) {
                    double s = 0.0;
                    for (int j = 0; j < dh; ++j) {
                        s += q[static_cast<std::size_t>(p)][col + static_cast<std::size_t>(j)] *
                             k[static_cast<std::size_t>(t)][col + static_cast<std::size_t>(j)];
                    }
                    s /= std::sqrt(static_cast<double>(dh));
                    scores[static_cast<std::size_t>(t)] = s;
                    if (s > top) top = s;
                }
                double denom = 0.0;
                for (double& s : scores) {
                    s = std::exp(s - top);
                    denom += s;
                }
                for (double& s : scores) s /= denom;
                for (int t = 0; t <= p; ++t) {
                    const double a = scores[static_cast<std::size_t>(t)];
                    for (int j = 0; j < dh; ++j) {
                        z[static_cast<std::size_t>(p)][col + static_cast<std::size_t>(j)] +=
                            a * v[static_cast<std::size_t>(t)][col + static_cast<std::size_t>(j)];
                    }
                }
            }
        }

        for (const Splice& sp : splices) {
            if (sp.head.layer != l) continue;
            const std::size_t col = static_cast<std::size_t>(sp.head.head) * dh;
            const int first = sp.all_positions ? 0 : seq - 1;
            for (int p = first; p < seq; ++p) {
                for (int j = 0; j < dh; ++j) {
                    double value = 0.0;
                    if (!sp.zero) {
                        value = sp.all_positions
                                    ? sp.rows[static_cast<std::size_t>(p) * dh +
                                              static_cast<std::size_t>(j)]
                                    : sp.rows[static_cast<std::size_t>(j)];
                    }
                    z[static_cast<std::size_t>(p)][col + static_cast<std::size_t>(j)] = value;
                }
            }
        }

        if (capture != nullptr && capture->layer == l && captured != nullptr) {
            const std::size_t col = static_cast<std::size_t>(capture->head) * dh;
            captured->assign(static_cast<std::size_t>(seq), Row(static_cast<std::size_t>(dh)));
            for (int p = 0; p < seq; ++p) {
                for (int j = 0; j < dh; ++j) {
                    (*captured)[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)] =
                        z[static_cast<std::size_t>(p)][col + static_cast<std::size_t>(j)];
                }
            }
        }

        for (int p = 0; p < seq; ++p) {
            const Row attn = affine(z[static_cast<std::size_t>(p)], weights.block(lo.w_o),
                                    weights.block(lo.b_o), static_cast<std::size_t>(d));
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)] +=
                    attn[static_cast<std::size_t>(j)];
            }
        }

        for (int p = 0; p < seq; ++p) {
            const Row n2 = layer_norm_row(x[static_cast<std::size_t>(p)],
                                          weights.block(lo.ln2_gamma),
                                          weights.block(lo.ln2_beta));
            Row hidden = affine(n2, weights.block(lo.w_fc1), weights.block(lo.b_fc1),
                                static_cast<std::size_t>(cfg.d_ff()));
            for (double& value : hidden) value = gelu_exact(value);
            const Row out = affine(hidden, weights.block(lo.w_fc2), weights.block(lo.b_fc2),
                                   static_cast<std::size_t>(d));
            for (int j = 0; j < d; ++j) {
                x[static_cast<std::size_t>(p)][static_cast<std::size_t>(j)] +=
                    out[static_cast<std::size_t>(j)];
            }
        }
    }

    const Row final_norm = layer_norm_row(x[static_cast<std::size_t>(seq - 1)],
                                          weights.block(layout.lnf_gamma),
                                          weights.block(layout.lnf_beta));
    return affine(final_norm, weights.block(layout.w_unembed), weights.block(layout.b_unembed),
                  static_cast<std::size_t>(cfg.vocab_size));
}

}  // namespace

std::vector<double> logits(const Weights& weights, const TokenSequence& input,
                           const std::vector<Splice>& splices) {
    return run(weights, input, splices, nullptr, nullptr);
}

std::vector<double> head_rows(const Weights& weights, const TokenSequence& input,
                              HeadId head) {
    Matrix captured;
    run(weights, input, {}, &head, &captured);
    std::vector<double> flat;
    for (const Row& row : captured) flat.insert(flat.end(), row.begin(), row.end());
    return flat;
}

double patched_advantage(const Weights& weights, const PatchSample& sample, HeadId head,
                         PositionScope scope) {
    const std::vector<double> donor = head_rows(weights, sample.clean, head);
    const int dh = weights.config.d_head;

    Splice splice;
    splice.head = head;
    splice.all_positions = scope == PositionScope::kAllPositions;
    if (splice.all_positions) {
        splice.rows = donor;
    } else {
        splice.rows.assign(donor.end() - dh, donor.end());
    }

    const std::vector<double> out = logits(weights, sample.conflict, {splice});
    return out[static_cast<std::size_t>(sample.y_h)] -
           out[static_cast<std::size_t>(sample.y_f)];
}

}  // namespace oracle
