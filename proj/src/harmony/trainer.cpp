#include "harmony/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "harmony/error.hpp"
#include "harmony/scores.hpp"
#include "harmony/serialize.hpp"

namespace harmony {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

const char* to_string(Variant v) {
    switch (v) {
        case Variant::None: return "none";
        case Variant::R: return "R";
        case Variant::M: return "M";
        case Variant::F: return "F";
    }
    return "?";
}

const char* to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

Variant variant_from_string(const std::string& s) {
    if (s == "none") return Variant::None;
    if (s == "R") return Variant::R;
    if (s == "M") return Variant::M;
    if (s == "F") return Variant::F;
    fail(ErrorKind::Config, "unknown variant '" + s + "' (none, R, M, F)");
}

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    fail(ErrorKind::Config, "unknown optimizer '" + s + "' (sgd, adam)");
}

void TrainConfig::validate() const {
    require(rounds >= 1, ErrorKind::Config, "rounds must be >= 1");
    require(mask_interval >= 1, ErrorKind::Config, "mask_interval must be >= 1");
    require(std::isfinite(lr) && lr > 0.0, ErrorKind::Config, "lr must be positive");
    require(eta_min >= 0, ErrorKind::Config, "eta_min must be >= 0");
    require(eta_max < 0 || eta_min <= eta_max, ErrorKind::Config, "eta_min must not exceed eta_max");
    require(sparsity >= 0.0 && sparsity < 1.0, ErrorKind::Config, "sparsity must lie in [0, 1)");
    require(lambda >= 0.0, ErrorKind::Config, "lambda must be >= 0");
    require(batch_size >= 1 && stat_batch_size >= 1 && probe_batch_size >= 1, ErrorKind::Config,
            "batch sizes must be >= 1");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::Config,
            "Adam betas must lie in [0, 1)");
    require(adam_eps > 0.0, ErrorKind::Config, "adam_eps must be positive");
    require(log_every >= 1, ErrorKind::Config, "log_every must be >= 1");
    require(mask_interval % log_every == 0 || log_every % mask_interval == 0, ErrorKind::Config,
            "mask_interval and log_every must divide one another");
    require(ema_decay >= 0.0 && ema_decay < 1.0, ErrorKind::Config, "ema_decay must lie in [0, 1)");
    require(threads >= 1, ErrorKind::Config, "threads must be >= 1");
    model.validate();
}

int TrainConfig::resolved_eta_max(std::size_t param_count) const {
    if (eta_max >= 0) return eta_max;
    return static_cast<int>(std::ceil(1e-5 * static_cast<double>(param_count)));
}

int alpha_schedule(long t, long rounds, double eta_min, double eta_max) {
    require(rounds >= 1 && t >= 1 && t <= rounds, ErrorKind::Precondition, "alpha_schedule: t must lie in [1, E]");
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(rounds);
    const double v = eta_max + 0.5 * (eta_min - eta_max) * (1.0 + std::cos(phase));
    // cos() leaves values like 50.000000000000007 at exact quarter periods.
    const double nearest = std::round(v);
    const double out = std::abs(v - nearest) < 1e-9 ? nearest : std::ceil(v);
    return static_cast<int>(std::max(0.0, out));
}

TrainState init_train_state(const TrainConfig& cfg, const std::vector<TaskId>& task_ids) {
    cfg.validate();
    require(!task_ids.empty(), ErrorKind::Config, "training needs at least one task");
    TrainState s;
    s.theta = init_params(cfg.model, derive_seed(cfg.seed, "init"));
    if (cfg.variant == Variant::None)
        s.masks = MaskSet::all_ones(s.theta.size(), task_ids);
    else
        s.masks = erk_init(s.theta.layout, cfg.sparsity, task_ids, derive_seed(cfg.seed, "masks"));
    s.adam_m.assign(s.theta.size(), 0.0);
    s.adam_v.assign(s.theta.size(), 0.0);
    s.rng = Rng(derive_seed(cfg.seed, "train"));
    return s;
}

void apply_update(TrainState& state, const TrainConfig& cfg, const TaskMask& mask, std::span<const double> grad) {
    auto& theta = state.theta.values;
    const std::size_t n = theta.size();
    require(grad.size() == n && mask.size() == n, ErrorKind::Dimension, "apply_update: length mismatch");
    if (cfg.optimizer == OptimizerKind::Sgd) {
        for (std::size_t j = 0; j < n; ++j)
            if (mask.bits[j]) theta[j] -= cfg.lr * grad[j];
        return;
    }
    require(state.adam_m.size() == n && state.adam_v.size() == n, ErrorKind::Dimension,
            "apply_update: optimizer moments do not match theta");
    ++state.adam_step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.adam_step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.adam_step));
    for (std::size_t j = 0; j < n; ++j) {
        const double g = mask.bits[j] ? grad[j] : 0.0;
        state.adam_m[j] = cfg.beta1 * state.adam_m[j] + (1.0 - cfg.beta1) * g;
        state.adam_v[j] = cfg.beta2 * state.adam_v[j] + (1.0 - cfg.beta2) * g * g;
        if (!mask.bits[j]) continue;
        const double mhat = state.adam_m[j] / c1;
        const double vhat = state.adam_v[j] / c2;
        theta[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

double inner_step(TrainState& state, const TrainConfig& cfg, TaskId task_id, const TokenBatch& batch) {
    const auto& mask = state.masks.at(task_id);
    auto mg = masked_gradient(state.theta.values, cfg.model, mask, batch, &state.rng);
    require(std::isfinite(mg.loss), ErrorKind::Numeric, "non-finite loss on task " + std::to_string(task_id));
    apply_update(state, cfg, mask, mg.grad);
    auto it = state.loss_ema.find(task_id);
    if (it == state.loss_ema.end())
        state.loss_ema[task_id] = mg.loss;
    else
        it->second = cfg.ema_decay * it->second + (1.0 - cfg.ema_decay) * mg.loss;
    return mg.loss;
}

namespace {

std::string fmt_double(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string metrics_csv_header() {
    return "# schema_version=" + std::to_string(kMetricsSchemaVersion) +
           "\nround,task_id,loss_ema,avg_harmony_raw,avg_harmony_masked,alpha_t\n";
}

std::string format_metrics_row(const MetricsRow& r) {
    std::ostringstream os;
    os << r.round << ',' << (r.task_id < 0 ? std::string("all") : std::to_string(r.task_id)) << ','
       << fmt_double(r.loss_ema) << ',' << fmt_double(r.avg_harmony_raw) << ',' << fmt_double(r.avg_harmony_masked)
       << ',' << r.alpha << '\n';
    return os.str();
}

std::pair<double, double> harmony_probe(std::span<const double> theta, const ModelConfig& cfg, const MaskSet& masks,
                                        const std::map<TaskId, TokenBatch>& probes) {
    std::vector<std::vector<double>> raw, masked;
    for (const auto& [id, mask] : masks.masks) {
        const auto& batch = probes.at(id);
        raw.push_back(loss_and_grad(theta, cfg, batch).grad);
        masked.push_back(masked_gradient(theta, cfg, mask, batch).grad);
    }
    return {avg_harmony_metric(raw), avg_harmony_metric(masked)};
}

void train_until(TrainState& state, const TrainConfig& cfg, const std::vector<TaskDataset>& datasets, long until_round,
                 const TrainHooks& hooks) {
    cfg.validate();
    require(!datasets.empty(), ErrorKind::Config, "training needs at least one dataset");
    std::map<TaskId, const TaskDataset*> by_id;
    for (const auto& d : datasets) {
        require(!d.empty(), ErrorKind::Config, "dataset for task " + std::to_string(d.task_id()) + " is empty");
        require(by_id.emplace(d.task_id(), &d).second, ErrorKind::Config,
                "duplicate dataset for task " + std::to_string(d.task_id()));
    }
    const auto ids = state.masks.task_ids();
    require(ids.size() == by_id.size(), ErrorKind::Config, "datasets do not match the mask set's tasks");
    for (TaskId id : ids)
        require(by_id.contains(id), ErrorKind::Config, "no dataset for task " + std::to_string(id));
    require(state.theta.size() == state.masks.param_count(), ErrorKind::Dimension, "masks do not match theta");

    const auto& m = cfg.model;
    const int eta_max = cfg.resolved_eta_max(state.theta.size());
    const bool learns_masks = cfg.variant == Variant::M || cfg.variant == Variant::F;
    const long end = std::min(until_round, cfg.rounds);

    // Probe batches depend only on the seed so resumed runs log the same curve.
    std::map<TaskId, TokenBatch> probes;
    {
        Rng prng(derive_seed(cfg.seed, "probe"));
        for (TaskId id : ids)
            probes[id] = sample_batch(*by_id.at(id), m.context_k, m.prompt_k, cfg.probe_batch_size, prng);
    }

    MaskUpdateOptions opts;
    opts.lambda = cfg.lambda;
    opts.importance = cfg.variant == Variant::F ? ImportanceKind::Fisher : ImportanceKind::Magnitude;
    opts.threads = cfg.threads;

    std::vector<double> before;
    for (long t = state.round + 1; t <= end; ++t) {
        try {
            if (learns_masks && t % cfg.mask_interval == 0) {
                std::map<TaskId, TokenBatch> stats;
                for (TaskId id : ids)
                    stats[id] = sample_batch(*by_id.at(id), m.context_k, m.prompt_k, cfg.stat_batch_size, state.rng);
                opts.alpha = alpha_schedule(t, cfg.rounds, cfg.eta_min, eta_max);
                opts.round = t;
                auto result = mask_update(state.masks, state.theta.values, m, stats, opts);
                state.masks = result.masks;
                if (hooks.on_mask_update) hooks.on_mask_update(t, opts.alpha, result);
            } else {
                const TaskId id = ids[state.rng.index(ids.size())];
                const auto batch = sample_batch(*by_id.at(id), m.context_k, m.prompt_k, cfg.batch_size, state.rng);
                if (hooks.on_inner_step) before = state.theta.values;
                const double loss = inner_step(state, cfg, id, batch);
                if (hooks.on_inner_step)
                    hooks.on_inner_step(InnerStepEvent{t, id, loss, state.masks.at(id), before, state.theta.values});
            }
            state.round = t;

            if (t % cfg.log_every == 0 && hooks.on_metrics) {
                const int alpha = learns_masks ? alpha_schedule(t, cfg.rounds, cfg.eta_min, eta_max) : 0;
                const double nan = std::numeric_limits<double>::quiet_NaN();
                double sum = 0.0;
                for (const auto& [id, ema] : state.loss_ema) {
                    hooks.on_metrics(MetricsRow{t, id, ema, nan, nan, alpha});
                    sum += ema;
                }
                const auto [raw, masked] = harmony_probe(state.theta.values, m, state.masks, probes);
                const double mean = state.loss_ema.empty() ? nan : sum / static_cast<double>(state.loss_ema.size());
                hooks.on_metrics(MetricsRow{t, -1, mean, raw, masked, alpha});
            }
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Numeric) fail(ErrorKind::Numeric, "round " + std::to_string(t) + ": " + e.what());
            throw;
        }
    }
}

TrainResult train(const TrainConfig& cfg, const std::vector<TaskDataset>& datasets) {
    std::vector<TaskId> ids;
    for (const auto& d : datasets) ids.push_back(d.task_id());
    TrainResult out{init_train_state(cfg, ids), {}, {}};
    TrainHooks hooks;
    hooks.on_metrics = [&](const MetricsRow& r) { out.metrics.push_back(r); };
    hooks.on_mask_update = [&](long, int, const MaskUpdateResult& res) {
        out.mask_records.insert(out.mask_records.end(), res.records.begin(), res.records.end());
    };
    train_until(out.state, cfg, datasets, cfg.rounds, hooks);
    return out;
}

// ---- checkpoints ----

namespace {

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

template <class T>
json append_block(std::string& blob, const T* data, std::size_t count) {
    const std::size_t offset = blob.size();
    blob.append(reinterpret_cast<const char*>(data), count * sizeof(T));
    return json{{"offset", offset}, {"count", count}};
}

template <class T>
std::vector<T> read_block(const std::string& blob, const json& ref) {
    const auto offset = ref.at("offset").get<std::size_t>();
    const auto count = ref.at("count").get<std::size_t>();
    require(offset <= blob.size() && count <= (blob.size() - offset) / sizeof(T), ErrorKind::Io,
            "checkpoint blob is truncated");
    std::vector<T> out(count);
    if (count) std::memcpy(out.data(), blob.data() + offset, count * sizeof(T));
    return out;
}

}  // namespace

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    p += ".bin";
    return p;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto& s = ckpt.state;
    s.theta.check();
    std::string blob;
    json j;
    j["version"] = kCheckpointVersion;
    j["config"] = to_json(ckpt.config);
    j["layout"] = to_json(s.theta.layout);
    j["round"] = s.round;
    j["adam_step"] = s.adam_step;
    j["rng"] = s.rng.serialize();
    j["sparsity"] = s.masks.sparsity;
    j["theta"] = append_block(blob, s.theta.values.data(), s.theta.size());
    j["adam_m"] = append_block(blob, s.adam_m.data(), s.adam_m.size());
    j["adam_v"] = append_block(blob, s.adam_v.data(), s.adam_v.size());
    json masks = json::array();
    for (const auto& [id, mask] : s.masks.masks) {
        const auto words = pack_bits(mask.bits);
        masks.push_back(json{{"task_id", id}, {"bits", mask.size()}, {"words", append_block(blob, words.data(), words.size())}});
    }
    j["masks"] = masks;
    json ema = json::array();
    for (const auto& [id, v] : s.loss_ema) ema.push_back(json{{"task_id", id}, {"value", append_block(blob, &v, 1)}});
    j["loss_ema"] = ema;
    const auto blob_path = checkpoint_blob_path(path);
    j["blob"] = json{{"file", blob_path.filename().string()}, {"size", blob.size()}, {"fnv1a64", hex(fnv1a(blob))}};

    write_file_atomic(blob_path, blob);
    write_file_atomic(path, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, "checkpoint manifest " + path.string() + ": " + e.what());
    }
    require(j.is_object() && j.contains("version"), ErrorKind::Schema, "checkpoint manifest has no version");
    const int version = j.at("version").get<int>();
    require(version == kCheckpointVersion, ErrorKind::Version,
            "checkpoint version " + std::to_string(version) + " is incompatible with version " +
                std::to_string(kCheckpointVersion));
    try {
        Checkpoint out;
        out.config = train_config_from_json(j.at("config"), "checkpoint.config");
        const auto layout = layout_from_json(j.at("layout"));
        require(layout == build_layout(out.config.model), ErrorKind::Schema,
                "checkpoint layout does not match its model config");

        const auto blob = read_file(path.parent_path() / j.at("blob").at("file").get<std::string>());
        require(blob.size() == j.at("blob").at("size").get<std::size_t>(), ErrorKind::Io,
                "checkpoint blob is truncated or padded");
        require(hex(fnv1a(blob)) == j.at("blob").at("fnv1a64").get<std::string>(), ErrorKind::Io,
                "checkpoint blob checksum mismatch");

        auto& s = out.state;
        s.theta.layout = layout;
        s.theta.values = read_block<double>(blob, j.at("theta"));
        s.theta.check();
        s.adam_m = read_block<double>(blob, j.at("adam_m"));
        s.adam_v = read_block<double>(blob, j.at("adam_v"));
        require(s.adam_m.size() == s.theta.size() && s.adam_v.size() == s.theta.size(), ErrorKind::Schema,
                "optimizer moments do not match theta");
        s.round = j.at("round").get<long>();
        require(s.round >= 0 && s.round <= out.config.rounds, ErrorKind::Schema, "checkpoint round out of range");
        s.adam_step = j.at("adam_step").get<long>();
        s.rng.deserialize(j.at("rng").get<std::string>());
        s.masks.sparsity = j.at("sparsity").get<double>();
        for (const auto& mj : j.at("masks")) {
            const auto words = read_block<uint64_t>(blob, mj.at("words"));
            const auto n = mj.at("bits").get<std::size_t>();
            require(n == s.theta.size(), ErrorKind::Schema, "mask length does not match theta");
            const TaskId id = mj.at("task_id").get<TaskId>();
            s.masks.masks[id] = TaskMask{id, unpack_bits(words, n)};
        }
        require(!s.masks.masks.empty(), ErrorKind::Schema, "checkpoint holds no masks");
        for (const auto& ej : j.at("loss_ema")) {
            const auto v = read_block<double>(blob, ej.at("value"));
            require(v.size() == 1, ErrorKind::Schema, "bad loss_ema entry");
            s.loss_ema[ej.at("task_id").get<TaskId>()] = v[0];
        }
        return out;
    } catch (const json::exception& e) {
        fail(ErrorKind::Schema, "checkpoint manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace harmony
