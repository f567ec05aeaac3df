#include "harmony/serialize.hpp"

namespace harmony {

StrictObject::StrictObject(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    require(j_.is_object(), ErrorKind::Config, context_ + ": expected a JSON object");
}

void StrictObject::finish() const {
    for (const auto& [key, _] : j_.items())
        if (!seen_.contains(key)) fail(ErrorKind::Config, context_ + ": unknown key '" + key + "'");
}

json to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},         {"n_heads", c.n_heads},     {"embed_dim", c.embed_dim},
                {"context_k", c.context_k},       {"prompt_k", c.prompt_k},   {"state_dim", c.state_dim},
                {"action_dim", c.action_dim},     {"max_timestep", c.max_timestep}, {"dropout", c.dropout},
                {"rtg_scale", c.rtg_scale},       {"action_scale", c.action_scale}};
}

ModelConfig model_config_from_json(const json& j, const std::string& context) {
    StrictObject o(j, context);
    ModelConfig c;
    c.n_layers = o.get("n_layers", c.n_layers);
    c.n_heads = o.get("n_heads", c.n_heads);
    c.embed_dim = o.get("embed_dim", c.embed_dim);
    c.context_k = o.get("context_k", c.context_k);
    c.prompt_k = o.get("prompt_k", c.prompt_k);
    c.state_dim = o.get("state_dim", c.state_dim);
    c.action_dim = o.get("action_dim", c.action_dim);
    c.max_timestep = o.get("max_timestep", c.max_timestep);
    c.dropout = o.get("dropout", c.dropout);
    c.rtg_scale = o.get("rtg_scale", c.rtg_scale);
    c.action_scale = o.get("action_scale", c.action_scale);
    o.finish();
    c.validate();
    return c;
}

json to_json(const TrainConfig& c) {
    return json{{"rounds", c.rounds},
                {"mask_interval", c.mask_interval},
                {"lr", c.lr},
                {"eta_min", c.eta_min},
                {"eta_max", c.eta_max},
                {"sparsity", c.sparsity},
                {"lambda", c.lambda},
                {"variant", to_string(c.variant)},
                {"batch_size", c.batch_size},
                {"stat_batch_size", c.stat_batch_size},
                {"probe_batch_size", c.probe_batch_size},
                {"seed", c.seed},
                {"optimizer", to_string(c.optimizer)},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"log_every", c.log_every},
                {"ema_decay", c.ema_decay},
                {"threads", c.threads},
                {"model", to_json(c.model)}};
}

TrainConfig train_config_from_json(const json& j, const std::string& context) {
    StrictObject o(j, context);
    TrainConfig c;
    c.rounds = o.get("rounds", c.rounds);
    c.mask_interval = o.get("mask_interval", c.mask_interval);
    c.lr = o.get("lr", c.lr);
    c.eta_min = o.get("eta_min", c.eta_min);
    c.eta_max = o.get("eta_max", c.eta_max);
    c.sparsity = o.get("sparsity", c.sparsity);
    c.lambda = o.get("lambda", c.lambda);
    c.variant = variant_from_string(o.get<std::string>("variant", to_string(c.variant)));
    c.batch_size = o.get("batch_size", c.batch_size);
    c.stat_batch_size = o.get("stat_batch_size", c.stat_batch_size);
    c.probe_batch_size = o.get("probe_batch_size", c.probe_batch_size);
    c.seed = o.get("seed", c.seed);
    c.optimizer = optimizer_from_string(o.get<std::string>("optimizer", to_string(c.optimizer)));
    c.beta1 = o.get("beta1", c.beta1);
    c.beta2 = o.get("beta2", c.beta2);
    c.adam_eps = o.get("adam_eps", c.adam_eps);
    c.log_every = o.get("log_every", c.log_every);
    c.ema_decay = o.get("ema_decay", c.ema_decay);
    c.threads = o.get("threads", c.threads);
    if (o.has("model")) c.model = model_config_from_json(o.raw("model"), context + ".model");
    o.finish();
    c.validate();
    return c;
}

json to_json(const PointTaskSpec& s) {
    return json{{"task_id", s.task_id},          {"kind", to_string(s.kind)},   {"angle", s.angle},
                {"target_speed", s.target_speed}, {"horizon", s.horizon},        {"action_bound", s.action_bound},
                {"gamma", s.gamma},              {"state_dim", kPointStateDim}};
}

PointTaskSpec task_spec_from_json(const json& j, const std::string& context) {
    StrictObject o(j, context);
    PointTaskSpec s;
    s.task_id = o.required<TaskId>("task_id");
    s.kind = task_kind_from_string(o.required<std::string>("kind"));
    s.angle = o.get("angle", s.angle);
    s.target_speed = o.get("target_speed", s.target_speed);
    s.horizon = o.get("horizon", s.horizon);
    s.action_bound = o.get("action_bound", s.action_bound);
    s.gamma = o.get("gamma", s.gamma);
    const int sd = o.get("state_dim", kPointStateDim);
    require(sd == kPointStateDim, ErrorKind::Config, context + ": state_dim must be 4");
    o.finish();
    s.validate();
    return s;
}

json to_json(const LayerLayout& l) {
    json segs = json::array();
    for (const auto& s : l.segments())
        segs.push_back(json{{"name", s.name},     {"offset", s.offset},   {"shape", s.shape},
                            {"fan_in", s.fan_in}, {"fan_out", s.fan_out}, {"kind", to_string(s.kind)}});
    return segs;
}

LayerLayout layout_from_json(const json& j) {
    require(j.is_array(), ErrorKind::Schema, "layout must be an array");
    LayerLayout l;
    for (const auto& s : j) {
        const auto kind = segment_kind_from_string(s.at("kind").get<std::string>());
        const auto shape = s.at("shape").get<std::vector<std::size_t>>();
        const auto name = s.at("name").get<std::string>();
        const Segment* added = nullptr;
        if (kind == SegmentKind::Matrix) {
            require(shape.size() == 2, ErrorKind::Schema, "matrix segment needs a 2-d shape");
            added = &l.add_matrix(name, shape[0], shape[1]);
        } else if (kind == SegmentKind::Bias) {
            require(shape.size() == 1, ErrorKind::Schema, "bias segment needs a 1-d shape");
            added = &l.add_bias(name, shape[0]);
        } else {
            require(shape.size() == 2, ErrorKind::Schema, "embedding segment needs a 2-d shape");
            added = &l.add_embedding(name, shape[0], shape[1]);
        }
        require(added->offset == s.at("offset").get<std::size_t>(), ErrorKind::Schema,
                "layout offset mismatch at '" + name + "'");
    }
    l.validate();
    return l;
}

json to_json(const EvalReport& r) {
    return json{{"schema_version", 1},
                {"task_id", r.task_id},
                {"episodes", r.episodes},
                {"mean_return", r.mean_return},
                {"success_rate", r.success_rate},
                {"per_episode_returns", r.per_episode_returns}};
}

json to_json(const MaskUpdateRecord& r) {
    return json{{"task_id", r.task_id},
                {"round", r.round},
                {"alpha", r.alpha},
                {"requested_alpha", r.requested_alpha},
                {"clamped", r.clamped},
                {"fisher_fallback", r.fisher_fallback},
                {"ones_before", r.ones_before},
                {"ones_after", r.ones_after},
                {"masked_indices", r.masked_indices},
                {"recovered_indices", r.recovered_indices}};
}

}  // namespace harmony
