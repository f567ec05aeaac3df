#include "harmony/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "harmony/error.hpp"
#include "harmony/rng.hpp"

namespace harmony {

void ModelConfig::validate() const {
    require(n_layers >= 1, ErrorKind::Config, "model.n_layers must be >= 1");
    require(n_heads >= 1, ErrorKind::Config, "model.n_heads must be >= 1");
    require(embed_dim >= 1 && embed_dim % n_heads == 0, ErrorKind::Config,
            "model.embed_dim must be a positive multiple of n_heads");
    require(context_k >= 1, ErrorKind::Config, "model.context_k must be >= 1");
    require(prompt_k >= 0, ErrorKind::Config, "model.prompt_k must be >= 0");
    require(state_dim >= 1 && action_dim >= 1, ErrorKind::Config, "model state/action dims must be >= 1");
    require(max_timestep >= 1, ErrorKind::Config, "model.max_timestep must be >= 1");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::Config, "model.dropout must lie in [0, 1)");
    require(std::isfinite(rtg_scale) && std::isfinite(action_scale) && action_scale > 0.0, ErrorKind::Config,
            "model.rtg_scale/action_scale must be finite, action_scale > 0");
}

TokenBatch TokenBatch::zeros(int batch, int prompt, int history, int state_dim, int action_dim) {
    TokenBatch tb;
    tb.batch = batch;
    tb.prompt = prompt;
    tb.history = history;
    tb.state_dim = state_dim;
    tb.action_dim = action_dim;
    const std::size_t bl = static_cast<std::size_t>(batch) * static_cast<std::size_t>(prompt + history);
    tb.rtg.assign(bl, 0.0);
    tb.states.assign(bl * state_dim, 0.0);
    tb.actions.assign(bl * action_dim, 0.0);
    tb.timesteps.assign(bl, 0);
    tb.valid.assign(bl, 0);
    tb.target_actions.assign(static_cast<std::size_t>(batch) * history * action_dim, 0.0);
    return tb;
}

void TokenBatch::set_step(int b, int s, const Step& step) {
    const std::size_t i = static_cast<std::size_t>(b) * steps() + s;
    require(step.state.size() == static_cast<std::size_t>(state_dim) &&
                step.action.size() == static_cast<std::size_t>(action_dim),
            ErrorKind::Dimension, "step dims do not match batch");
    rtg[i] = step.rtg;
    std::copy(step.state.begin(), step.state.end(), states.begin() + i * state_dim);
    std::copy(step.action.begin(), step.action.end(), actions.begin() + i * action_dim);
    timesteps[i] = step.timestep;
    valid[i] = 1;
}

void TokenBatch::check(const ModelConfig& cfg) const {
    require(batch >= 1, ErrorKind::Precondition, "token batch is empty");
    require(prompt == cfg.prompt_k && history == cfg.context_k, ErrorKind::Dimension,
            "token batch prompt/history lengths do not match model config");
    require(state_dim == cfg.state_dim && action_dim == cfg.action_dim, ErrorKind::Dimension,
            "token batch state/action dims do not match model config");
    const std::size_t bl = static_cast<std::size_t>(batch) * steps();
    require(rtg.size() == bl && timesteps.size() == bl && valid.size() == bl &&
                states.size() == bl * state_dim && actions.size() == bl * action_dim &&
                target_actions.size() == static_cast<std::size_t>(batch) * history * action_dim,
            ErrorKind::Dimension, "token batch arrays have inconsistent sizes");
}

LayerLayout build_layout(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<std::size_t>(cfg.embed_dim);
    LayerLayout l;
    l.add_embedding("embed.timestep", cfg.max_timestep, d);
    l.add_matrix("embed.return.weight", d, 1);
    l.add_bias("embed.return.bias", d);
    l.add_matrix("embed.state.weight", d, cfg.state_dim);
    l.add_bias("embed.state.bias", d);
    l.add_matrix("embed.action.weight", d, cfg.action_dim);
    l.add_bias("embed.action.bias", d);
    l.add_bias("embed.ln.gamma", d);
    l.add_bias("embed.ln.beta", d);
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        l.add_bias(p + "ln1.gamma", d);
        l.add_bias(p + "ln1.beta", d);
        l.add_matrix(p + "attn.qkv.weight", 3 * d, d);
        l.add_bias(p + "attn.qkv.bias", 3 * d);
        l.add_matrix(p + "attn.proj.weight", d, d);
        l.add_bias(p + "attn.proj.bias", d);
        l.add_bias(p + "ln2.gamma", d);
        l.add_bias(p + "ln2.beta", d);
        l.add_matrix(p + "mlp.fc.weight", 4 * d, d);
        l.add_bias(p + "mlp.fc.bias", 4 * d);
        l.add_matrix(p + "mlp.proj.weight", d, 4 * d);
        l.add_bias(p + "mlp.proj.bias", d);
    }
    l.add_bias("final.ln.gamma", d);
    l.add_bias("final.ln.beta", d);
    l.add_matrix("head.weight", cfg.action_dim, d);
    l.add_bias("head.bias", cfg.action_dim);
    return l;
}

ParamVector init_params(const ModelConfig& cfg, uint64_t seed) {
    ParamVector theta(build_layout(cfg));
    Rng rng(seed);
    for (const auto& seg : theta.layout.segments()) {
        auto v = std::span<double>(theta.values).subspan(seg.offset, seg.size());
        const bool is_gain = seg.name.ends_with(".gamma");
        if (seg.kind == SegmentKind::Bias) {
            std::fill(v.begin(), v.end(), is_gain ? 1.0 : 0.0);
            continue;
        }
        for (double& x : v) {
            double z = rng.normal();
            while (std::abs(z) > 2.0) z = rng.normal();
            x = 0.02 * z;
        }
    }
    return theta;
}

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using WMap = Eigen::Map<Mat>;
using CRow = Eigen::Map<const Eigen::RowVectorXd>;
using WRow = Eigen::Map<Eigen::RowVectorXd>;

constexpr double kLnEps = 1e-5;

struct BlockOffsets {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, mp_w, mp_b;
};

struct Offsets {
    std::size_t time, ret_w, ret_b, st_w, st_b, act_w, act_b, eln_g, eln_b;
    std::vector<BlockOffsets> blocks;
    std::size_t lnf_g, lnf_b, head_w, head_b;
    std::size_t total;
};

Offsets offsets_for(const ModelConfig& cfg) {
    const LayerLayout l = build_layout(cfg);
    auto at = [&](const std::string& n) { return l.segment(n).offset; };
    Offsets o{};
    o.time = at("embed.timestep");
    o.ret_w = at("embed.return.weight");
    o.ret_b = at("embed.return.bias");
    o.st_w = at("embed.state.weight");
    o.st_b = at("embed.state.bias");
    o.act_w = at("embed.action.weight");
    o.act_b = at("embed.action.bias");
    o.eln_g = at("embed.ln.gamma");
    o.eln_b = at("embed.ln.beta");
    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        o.blocks.push_back({at(p + "ln1.gamma"), at(p + "ln1.beta"), at(p + "attn.qkv.weight"),
                            at(p + "attn.qkv.bias"), at(p + "attn.proj.weight"), at(p + "attn.proj.bias"),
                            at(p + "ln2.gamma"), at(p + "ln2.beta"), at(p + "mlp.fc.weight"),
                            at(p + "mlp.fc.bias"), at(p + "mlp.proj.weight"), at(p + "mlp.proj.bias")});
    }
    o.lnf_g = at("final.ln.gamma");
    o.lnf_b = at("final.ln.beta");
    o.head_w = at("head.weight");
    o.head_b = at("head.bias");
    o.total = l.total();
    return o;
}

struct LnCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

void ln_forward(const Mat& x, const double* g, const double* b, Mat& y, LnCache& c) {
    const auto n = x.rows();
    const auto d = x.cols();
    c.xhat.resize(n, d);
    c.rstd.resize(n);
    y.resize(n, d);
    const CRow gain(g, d), bias(b, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().mean();
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        c.rstd(r) = rs;
        c.xhat.row(r) = (x.row(r).array() - mu) * rs;
        y.row(r) = c.xhat.row(r).cwiseProduct(gain) + bias;
    }
}

// Accumulates the input gradient into dx.
void ln_backward(const Mat& dy, const double* g, const LnCache& c, double* dg, double* db, Mat& dx) {
    const auto n = dy.rows();
    const auto d = dy.cols();
    const CRow gain(g, d);
    WRow dgain(dg, d), dbias(db, d);
    dgain += dy.cwiseProduct(c.xhat).colwise().sum();
    dbias += dy.colwise().sum();
    for (Eigen::Index r = 0; r < n; ++r) {
        const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain);
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(c.xhat.row(r)).mean();
        dx.row(r).array() += c.rstd(r) * (dxhat.array() - m1 - c.xhat.row(r).array() * m2);
    }
}

Mat make_dropout(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    Mat m(rows, cols);
    const double keep = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? 0.0 : keep;
    return m;
}

struct BlockCache {
    LnCache ln1;
    Mat a1, qkv, y, drop1;
    std::vector<Mat> probs;  // [batch * heads] of [T, T]
    LnCache ln2;
    Mat m2, f, r, drop2;
};

struct Cache {
    Mat in_r, in_s, in_a;
    std::vector<int> ts;
    LnCache eln;
    Mat drop0;
    std::vector<BlockCache> blocks;
    LnCache lnf;
    Mat hs, th;  // head inputs, tanh outputs
};

void check_finite(const Mat& m, const std::string& where) {
    if (!m.allFinite()) fail(ErrorKind::Numeric, "non-finite activation in " + where);
}

// Runs the network; fills cache when backward will follow.
Mat run_forward(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch, Rng* rng,
                const Offsets& o, Cache* cache) {
    require(theta.size() == o.total, ErrorKind::Dimension,
            "theta has " + std::to_string(theta.size()) + " entries, model expects " + std::to_string(o.total));
    batch.check(cfg);
    const double* p = theta.data();
    const int B = batch.batch, L = batch.steps(), T = 3 * L, K = batch.history, P = batch.prompt;
    const int d = cfg.embed_dim, H = cfg.n_heads, hd = d / H;
    const int sd = cfg.state_dim, ad = cfg.action_dim;
    const Eigen::Index N = static_cast<Eigen::Index>(B) * T;
    const bool use_drop = rng != nullptr && cfg.dropout > 0.0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Cache local;
    Cache& c = cache ? *cache : local;

    c.in_r = CMap(batch.rtg.data(), B * L, 1) * cfg.rtg_scale;
    c.in_s = CMap(batch.states.data(), B * L, sd);
    c.in_a = CMap(batch.actions.data(), B * L, ad);
    c.ts.resize(static_cast<std::size_t>(B) * L);
    for (std::size_t i = 0; i < c.ts.size(); ++i) c.ts[i] = std::clamp(batch.timesteps[i], 0, cfg.max_timestep - 1);

    Mat er = c.in_r * CMap(p + o.ret_w, d, 1).transpose();
    er.rowwise() += CRow(p + o.ret_b, d);
    Mat es = c.in_s * CMap(p + o.st_w, d, sd).transpose();
    es.rowwise() += CRow(p + o.st_b, d);
    Mat ea = c.in_a * CMap(p + o.act_w, d, ad).transpose();
    ea.rowwise() += CRow(p + o.act_b, d);
    const CMap time_emb(p + o.time, cfg.max_timestep, d);

    Mat x0(N, d);
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < L; ++s) {
            const int bs = b * L + s;
            const auto row = static_cast<Eigen::Index>(b) * T + 3 * s;
            const auto te = time_emb.row(c.ts[bs]);
            x0.row(row) = er.row(bs) + te;
            x0.row(row + 1) = es.row(bs) + te;
            x0.row(row + 2) = ea.row(bs) + te;
        }

    Mat h;
    ln_forward(x0, p + o.eln_g, p + o.eln_b, h, c.eln);
    if (use_drop) {
        c.drop0 = make_dropout(N, d, cfg.dropout, *rng);
        h = h.cwiseProduct(c.drop0);
    } else {
        c.drop0.resize(0, 0);
    }

    // allowed(b, i, j): key j is visible to query i.
    auto key_valid = [&](int b, int j) { return batch.valid[static_cast<std::size_t>(b) * L + j / 3] != 0; };

    c.blocks.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& bo = o.blocks[l];
        auto& bc = c.blocks[l];
        ln_forward(h, p + bo.ln1_g, p + bo.ln1_b, bc.a1, bc.ln1);
        bc.qkv = bc.a1 * CMap(p + bo.qkv_w, 3 * d, d).transpose();
        bc.qkv.rowwise() += CRow(p + bo.qkv_b, 3 * d);
        bc.y = Mat::Zero(N, d);
        bc.probs.resize(static_cast<std::size_t>(B) * H);
        for (int b = 0; b < B; ++b) {
            for (int hh = 0; hh < H; ++hh) {
                const auto r0 = static_cast<Eigen::Index>(b) * T;
                const auto q = bc.qkv.block(r0, hh * hd, T, hd);
                const auto k = bc.qkv.block(r0, d + hh * hd, T, hd);
                const auto v = bc.qkv.block(r0, 2 * d + hh * hd, T, hd);
                Mat s = (q * k.transpose()) * scale;
                Mat& pr = bc.probs[static_cast<std::size_t>(b) * H + hh];
                pr = Mat::Zero(T, T);
                for (int i = 0; i < T; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int j = 0; j <= i; ++j)
                        if (key_valid(b, j)) mx = std::max(mx, s(i, j));
                    if (!std::isfinite(mx)) continue;  // no visible keys
                    double z = 0.0;
                    for (int j = 0; j <= i; ++j)
                        if (key_valid(b, j)) z += (pr(i, j) = std::exp(s(i, j) - mx));
                    pr.row(i).head(i + 1) /= z;
                }
                bc.y.block(r0, hh * hd, T, hd) = pr * v;
            }
        }
        Mat out = bc.y * CMap(p + bo.proj_w, d, d).transpose();
        out.rowwise() += CRow(p + bo.proj_b, d);
        if (use_drop) {
            bc.drop1 = make_dropout(N, d, cfg.dropout, *rng);
            out = out.cwiseProduct(bc.drop1);
        }
        h += out;

        ln_forward(h, p + bo.ln2_g, p + bo.ln2_b, bc.m2, bc.ln2);
        bc.f = bc.m2 * CMap(p + bo.fc_w, 4 * d, d).transpose();
        bc.f.rowwise() += CRow(p + bo.fc_b, 4 * d);
        bc.r = bc.f.cwiseMax(0.0);
        Mat z = bc.r * CMap(p + bo.mp_w, d, 4 * d).transpose();
        z.rowwise() += CRow(p + bo.mp_b, d);
        if (use_drop) {
            bc.drop2 = make_dropout(N, d, cfg.dropout, *rng);
            z = z.cwiseProduct(bc.drop2);
        }
        h += z;
        check_finite(h, "block" + std::to_string(l));
    }

    Mat hf;
    ln_forward(h, p + o.lnf_g, p + o.lnf_b, hf, c.lnf);
    c.hs.resize(static_cast<Eigen::Index>(B) * K, d);
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < K; ++j) c.hs.row(b * K + j) = hf.row(static_cast<Eigen::Index>(b) * T + 3 * (P + j) + 1);
    Mat u = c.hs * CMap(p + o.head_w, ad, d).transpose();
    u.rowwise() += CRow(p + o.head_b, ad);
    c.th = u.array().tanh().matrix();
    Mat pred = c.th * cfg.action_scale;
    check_finite(pred, "action head");
    return pred;
}

void run_backward(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch, const Offsets& o,
                  const Cache& c, const Mat& dpred, std::vector<double>& grad) {
    const double* p = theta.data();
    double* g = grad.data();
    const int B = batch.batch, L = batch.steps(), T = 3 * L, K = batch.history, P = batch.prompt;
    const int d = cfg.embed_dim, H = cfg.n_heads, hd = d / H;
    const int sd = cfg.state_dim, ad = cfg.action_dim;
    const Eigen::Index N = static_cast<Eigen::Index>(B) * T;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat du = (dpred.array() * cfg.action_scale * (1.0 - c.th.array().square())).matrix();
    WMap(g + o.head_w, ad, d) += du.transpose() * c.hs;
    WRow(g + o.head_b, ad) += du.colwise().sum();
    const Mat dhs = du * CMap(p + o.head_w, ad, d);
    Mat dhf = Mat::Zero(N, d);
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < K; ++j) dhf.row(static_cast<Eigen::Index>(b) * T + 3 * (P + j) + 1) = dhs.row(b * K + j);

    Mat dh = Mat::Zero(N, d);
    ln_backward(dhf, p + o.lnf_g, c.lnf, g + o.lnf_g, g + o.lnf_b, dh);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& bo = o.blocks[l];
        const auto& bc = c.blocks[l];

        Mat dz = bc.drop2.size() ? Mat(dh.cwiseProduct(bc.drop2)) : dh;
        WMap(g + bo.mp_w, d, 4 * d) += dz.transpose() * bc.r;
        WRow(g + bo.mp_b, d) += dz.colwise().sum();
        Mat dr = dz * CMap(p + bo.mp_w, d, 4 * d);
        dr = (bc.f.array() > 0.0).select(dr, 0.0);
        WMap(g + bo.fc_w, 4 * d, d) += dr.transpose() * bc.m2;
        WRow(g + bo.fc_b, 4 * d) += dr.colwise().sum();
        const Mat dm2 = dr * CMap(p + bo.fc_w, 4 * d, d);
        ln_backward(dm2, p + bo.ln2_g, bc.ln2, g + bo.ln2_g, g + bo.ln2_b, dh);

        Mat dout = bc.drop1.size() ? Mat(dh.cwiseProduct(bc.drop1)) : dh;
        WMap(g + bo.proj_w, d, d) += dout.transpose() * bc.y;
        WRow(g + bo.proj_b, d) += dout.colwise().sum();
        const Mat dy = dout * CMap(p + bo.proj_w, d, d);

        Mat dqkv = Mat::Zero(N, 3 * d);
        for (int b = 0; b < B; ++b) {
            for (int hh = 0; hh < H; ++hh) {
                const auto r0 = static_cast<Eigen::Index>(b) * T;
                const auto q = bc.qkv.block(r0, hh * hd, T, hd);
                const auto k = bc.qkv.block(r0, d + hh * hd, T, hd);
                const auto v = bc.qkv.block(r0, 2 * d + hh * hd, T, hd);
                const Mat& pr = bc.probs[static_cast<std::size_t>(b) * H + hh];
                const auto dO = dy.block(r0, hh * hd, T, hd);
                const Mat dP = dO * v.transpose();
                dqkv.block(r0, 2 * d + hh * hd, T, hd) = pr.transpose() * dO;
                Mat dS = pr.cwiseProduct(dP);
                const Eigen::VectorXd rowdot = dS.rowwise().sum();
                dS -= pr.cwiseProduct(rowdot.replicate(1, T));
                dS *= scale;
                dqkv.block(r0, hh * hd, T, hd) = dS * k;
                dqkv.block(r0, d + hh * hd, T, hd) = dS.transpose() * q;
            }
        }
        WMap(g + bo.qkv_w, 3 * d, d) += dqkv.transpose() * bc.a1;
        WRow(g + bo.qkv_b, 3 * d) += dqkv.colwise().sum();
        const Mat da1 = dqkv * CMap(p + bo.qkv_w, 3 * d, d);
        ln_backward(da1, p + bo.ln1_g, bc.ln1, g + bo.ln1_g, g + bo.ln1_b, dh);
    }

    if (c.drop0.size()) dh = dh.cwiseProduct(c.drop0);
    Mat dx0 = Mat::Zero(N, d);
    ln_backward(dh, p + o.eln_g, c.eln, g + o.eln_g, g + o.eln_b, dx0);

    Mat der(B * L, d), des(B * L, d), dea(B * L, d);
    WMap dtime(g + o.time, cfg.max_timestep, d);
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < L; ++s) {
            const int bs = b * L + s;
            const auto row = static_cast<Eigen::Index>(b) * T + 3 * s;
            der.row(bs) = dx0.row(row);
            des.row(bs) = dx0.row(row + 1);
            dea.row(bs) = dx0.row(row + 2);
            dtime.row(c.ts[bs]) += dx0.row(row) + dx0.row(row + 1) + dx0.row(row + 2);
        }
    WMap(g + o.ret_w, d, 1) += der.transpose() * c.in_r;
    WRow(g + o.ret_b, d) += der.colwise().sum();
    WMap(g + o.st_w, d, sd) += des.transpose() * c.in_s;
    WRow(g + o.st_b, d) += des.colwise().sum();
    WMap(g + o.act_w, d, ad) += dea.transpose() * c.in_a;
    WRow(g + o.act_b, d) += dea.colwise().sum();
}

std::size_t count_valid_history(const TokenBatch& batch) {
    std::size_t n = 0;
    for (int b = 0; b < batch.batch; ++b)
        for (int j = 0; j < batch.history; ++j) n += batch.valid[static_cast<std::size_t>(b) * batch.steps() + batch.prompt + j];
    return n;
}

}  // namespace

std::vector<double> forward(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch,
                            Rng* dropout_rng) {
    const Offsets o = offsets_for(cfg);
    const Mat pred = run_forward(theta, cfg, batch, dropout_rng, o, nullptr);
    return std::vector<double>(pred.data(), pred.data() + pred.size());
}

double loss(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch) {
    const std::size_t nv = count_valid_history(batch);
    require(nv > 0, ErrorKind::Precondition, "loss: batch has no valid history positions");
    const auto pred = forward(theta, cfg, batch);
    const int K = batch.history, ad = batch.action_dim;
    double sum = 0.0;
    for (int b = 0; b < batch.batch; ++b)
        for (int j = 0; j < K; ++j) {
            if (!batch.valid[static_cast<std::size_t>(b) * batch.steps() + batch.prompt + j]) continue;
            for (int a = 0; a < ad; ++a) {
                const std::size_t i = (static_cast<std::size_t>(b) * K + j) * ad + a;
                const double e = pred[i] - batch.target_actions[i];
                sum += e * e;
            }
        }
    return sum / (static_cast<double>(nv) * ad);
}

LossGrad loss_and_grad(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch,
                       Rng* dropout_rng) {
    const std::size_t nv = count_valid_history(batch);
    require(nv > 0, ErrorKind::Precondition, "loss_and_grad: batch has no valid history positions");
    const Offsets o = offsets_for(cfg);
    Cache cache;
    const Mat pred = run_forward(theta, cfg, batch, dropout_rng, o, &cache);

    const int K = batch.history, ad = batch.action_dim;
    const double denom = static_cast<double>(nv) * ad;
    Mat dpred = Mat::Zero(pred.rows(), pred.cols());
    double sum = 0.0;
    for (int b = 0; b < batch.batch; ++b)
        for (int j = 0; j < K; ++j) {
            if (!batch.valid[static_cast<std::size_t>(b) * batch.steps() + batch.prompt + j]) continue;
            for (int a = 0; a < ad; ++a) {
                const double e = pred(b * K + j, a) - batch.target_actions[(static_cast<std::size_t>(b) * K + j) * ad + a];
                sum += e * e;
                dpred(b * K + j, a) = 2.0 * e / denom;
            }
        }
    LossGrad out;
    out.loss = sum / denom;
    out.grad.assign(theta.size(), 0.0);
    run_backward(theta, cfg, batch, o, cache, dpred, out.grad);
    return out;
}

std::vector<double> predict_next_action(std::span<const double> theta, const ModelConfig& cfg,
                                        std::span<const Step> prompt, std::span<const Step> history) {
    require(!history.empty(), ErrorKind::Precondition, "predict_next_action: empty history");
    require(prompt.size() == static_cast<std::size_t>(cfg.prompt_k), ErrorKind::Dimension,
            "predict_next_action: prompt must have exactly prompt_k steps");
    const int K = cfg.context_k;
    const auto recent = history.size() > static_cast<std::size_t>(K) ? history.last(K) : history;
    TokenBatch tb = TokenBatch::zeros(1, cfg.prompt_k, K, cfg.state_dim, cfg.action_dim);
    for (int s = 0; s < cfg.prompt_k; ++s) tb.set_step(0, s, prompt[s]);
    const int pad = K - static_cast<int>(recent.size());
    for (std::size_t j = 0; j < recent.size(); ++j) tb.set_step(0, cfg.prompt_k + pad + static_cast<int>(j), recent[j]);
    const auto pred = forward(theta, cfg, tb);
    return std::vector<double>(pred.end() - cfg.action_dim, pred.end());
}

}  // namespace harmony
