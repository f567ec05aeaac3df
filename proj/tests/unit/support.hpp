#pragma once

// Shared fixtures and test-only oracles. Nothing here calls into the code
// paths the oracles check.

#include <cmath>
#include <string>
#include <vector>

#include "harmony/model.hpp"
#include "harmony/rng.hpp"

namespace harmony::testing {

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.embed_dim = 8;
    c.context_k = 3;
    c.prompt_k = 2;
    c.state_dim = 3;
    c.action_dim = 2;
    c.max_timestep = 10;
    c.dropout = 0.0;
    c.rtg_scale = 0.1;
    return c;
}

// Random batch; `pad` leading history steps of row 0 are left as padding.
inline TokenBatch random_batch(const ModelConfig& cfg, int B, Rng& rng, int pad = 0) {
    TokenBatch tb = TokenBatch::zeros(B, cfg.prompt_k, cfg.context_k, cfg.state_dim, cfg.action_dim);
    for (int b = 0; b < B; ++b) {
        for (int s = 0; s < tb.steps(); ++s) {
            if (b == 0 && s >= cfg.prompt_k && s < cfg.prompt_k + pad) continue;
            Step st;
            st.rtg = rng.uniform(-5, 5);
            for (int i = 0; i < cfg.state_dim; ++i) st.state.push_back(rng.uniform(-1, 1));
            for (int i = 0; i < cfg.action_dim; ++i) st.action.push_back(rng.uniform(-1, 1));
            st.timestep = static_cast<int>(rng.index(static_cast<uint64_t>(cfg.max_timestep)));
            tb.set_step(b, s, st);
        }
        for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.context_k * cfg.action_dim); ++i)
            tb.target_actions[static_cast<std::size_t>(b) * cfg.context_k * cfg.action_dim + i] = rng.uniform(-0.9, 0.9);
    }
    return tb;
}

inline std::vector<double> random_theta(const ModelConfig& cfg, Rng& rng, double scale = 0.3) {
    std::vector<double> t(build_layout(cfg).total());
    for (double& x : t) x = rng.uniform(-scale, scale);
    return t;
}

// Scalar, loop-by-loop evaluation of the network on one batch row. Reads
// parameters by segment name; shares no code with the Eigen implementation.
class ScalarForward {
public:
    ScalarForward(const std::vector<double>& theta, const ModelConfig& cfg)
        : theta_(theta), cfg_(cfg), layout_(build_layout(cfg)) {}

    std::vector<std::vector<double>> run(const TokenBatch& tb, int b) const {
        const int L = tb.steps(), T = 3 * L, d = cfg_.embed_dim, H = cfg_.n_heads, hd = d / H;
        std::vector<std::vector<double>> x(T, std::vector<double>(d));
        for (int s = 0; s < L; ++s) {
            const std::size_t i = static_cast<std::size_t>(b) * L + s;
            int t = tb.timesteps[i];
            t = t < 0 ? 0 : (t >= cfg_.max_timestep ? cfg_.max_timestep - 1 : t);
            for (int k = 0; k < d; ++k) {
                const double te = w("embed.timestep", t * d + k);
                x[3 * s][k] = w("embed.return.weight", k) * tb.rtg[i] * cfg_.rtg_scale + w("embed.return.bias", k) + te;
                double acc = w("embed.state.bias", k);
                for (int j = 0; j < cfg_.state_dim; ++j)
                    acc += w("embed.state.weight", k * cfg_.state_dim + j) * tb.states[i * cfg_.state_dim + j];
                x[3 * s + 1][k] = acc + te;
                acc = w("embed.action.bias", k);
                for (int j = 0; j < cfg_.action_dim; ++j)
                    acc += w("embed.action.weight", k * cfg_.action_dim + j) * tb.actions[i * cfg_.action_dim + j];
                x[3 * s + 2][k] = acc + te;
            }
        }
        auto h = layer_norm(x, "embed.ln");
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            const auto a = layer_norm(h, p + "ln1");
            const auto qkv = linear(a, p + "attn.qkv", 3 * d, d);
            std::vector<std::vector<double>> y(T, std::vector<double>(d, 0.0));
            for (int head = 0; head < H; ++head) {
                for (int i = 0; i < T; ++i) {
                    std::vector<double> sc(T, 0.0);
                    std::vector<int> ok(T, 0);
                    double mx = -1e300;
                    bool any = false;
                    for (int j = 0; j <= i; ++j) {
                        if (!tb.valid[static_cast<std::size_t>(b) * L + j / 3]) continue;
                        double dot = 0.0;
                        for (int k = 0; k < hd; ++k) dot += qkv[i][head * hd + k] * qkv[j][d + head * hd + k];
                        sc[j] = dot / std::sqrt(static_cast<double>(hd));
                        ok[j] = 1;
                        any = true;
                        mx = std::max(mx, sc[j]);
                    }
                    if (!any) continue;
                    double z = 0.0;
                    for (int j = 0; j <= i; ++j)
                        if (ok[j]) z += std::exp(sc[j] - mx);
                    for (int j = 0; j <= i; ++j) {
                        if (!ok[j]) continue;
                        const double pj = std::exp(sc[j] - mx) / z;
                        for (int k = 0; k < hd; ++k) y[i][head * hd + k] += pj * qkv[j][2 * d + head * hd + k];
                    }
                }
            }
            const auto o = linear(y, p + "attn.proj", d, d);
            for (int i = 0; i < T; ++i)
                for (int k = 0; k < d; ++k) h[i][k] += o[i][k];
            const auto m = layer_norm(h, p + "ln2");
            auto f = linear(m, p + "mlp.fc", 4 * d, d);
            for (auto& row : f)
                for (double& v : row) v = v > 0.0 ? v : 0.0;
            const auto z = linear(f, p + "mlp.proj", d, 4 * d);
            for (int i = 0; i < T; ++i)
                for (int k = 0; k < d; ++k) h[i][k] += z[i][k];
        }
        const auto hf = layer_norm(h, "final.ln");
        std::vector<std::vector<double>> out;
        for (int j = 0; j < tb.history; ++j) {
            const auto& row = hf[3 * (tb.prompt + j) + 1];
            std::vector<double> act(cfg_.action_dim);
            for (int a = 0; a < cfg_.action_dim; ++a) {
                double acc = w("head.bias", a);
                for (int k = 0; k < d; ++k) acc += w("head.weight", a * d + k) * row[k];
                act[a] = cfg_.action_scale * std::tanh(acc);
            }
            out.push_back(act);
        }
        return out;
    }

private:
    double w(const std::string& seg, std::size_t i) const { return theta_[layout_.segment(seg).offset + i]; }

    std::vector<std::vector<double>> layer_norm(const std::vector<std::vector<double>>& x, const std::string& p) const {
        auto y = x;
        for (std::size_t r = 0; r < x.size(); ++r) {
            const double n = static_cast<double>(x[r].size());
            double mu = 0.0, var = 0.0;
            for (double v : x[r]) mu += v;
            mu /= n;
            for (double v : x[r]) var += (v - mu) * (v - mu);
            var /= n;
            for (std::size_t k = 0; k < x[r].size(); ++k)
                y[r][k] = (x[r][k] - mu) / std::sqrt(var + 1e-5) * w(p + ".gamma", k) + w(p + ".beta", k);
        }
        return y;
    }

    std::vector<std::vector<double>> linear(const std::vector<std::vector<double>>& x, const std::string& p, int out,
                                            int in) const {
        std::vector<std::vector<double>> y(x.size(), std::vector<double>(out));
        for (std::size_t r = 0; r < x.size(); ++r)
            for (int o = 0; o < out; ++o) {
                double acc = w(p + ".bias", o);
                for (int i = 0; i < in; ++i) acc += w(p + ".weight", o * in + i) * x[r][i];
                y[r][o] = acc;
            }
        return y;
    }

    const std::vector<double>& theta_;
    ModelConfig cfg_;
    LayerLayout layout_;
};

// Central finite difference of f along coordinate i.
template <class F>
double central_difference(F&& f, std::vector<double> x, std::size_t i, double h = 1e-5) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    return (up - down) / (2.0 * h);
}

}  // namespace harmony::testing

namespace harmony::testing {

// Small model sized for the point-mass tasks.
inline ModelConfig point_config() {
    ModelConfig c = tiny_config();
    c.state_dim = 4;
    c.max_timestep = 50;
    c.dropout = 0.0;
    return c;
}

}  // namespace harmony::testing
