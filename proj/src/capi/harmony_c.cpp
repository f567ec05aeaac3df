#include "harmony/harmony.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "harmony/error.hpp"
#include "harmony/run.hpp"
#include "harmony/serialize.hpp"

struct hm_run {
    harmony::RunConfig config;
};

struct hm_checkpoint {
    harmony::Checkpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

hm_status status_of(harmony::ErrorKind kind) {
    using harmony::ErrorKind;
    switch (kind) {
        case ErrorKind::Config: return HM_ERR_CONFIG;
        case ErrorKind::Dimension: return HM_ERR_DIMENSION;
        case ErrorKind::Numeric: return HM_ERR_NUMERIC;
        case ErrorKind::Precondition: return HM_ERR_PRECONDITION;
        case ErrorKind::Selection: return HM_ERR_SELECTION;
        case ErrorKind::Parse: return HM_ERR_PARSE;
        case ErrorKind::Schema: return HM_ERR_SCHEMA;
        case ErrorKind::Io: return HM_ERR_IO;
        case ErrorKind::Version: return HM_ERR_VERSION;
    }
    return HM_ERR_INTERNAL;
}

template <class F>
hm_status guarded(F&& f) {
    g_last_error.clear();
    try {
        f();
        return HM_OK;
    } catch (const harmony::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const nlohmann::json::exception& e) {
        g_last_error = e.what();
        return HM_ERR_SCHEMA;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return HM_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return HM_ERR_INTERNAL;
    }
}

#define HM_REQUIRE_ARG(p)                                                                      \
    do {                                                                                       \
        if (!(p)) {                                                                            \
            g_last_error = std::string(__func__) + ": null argument '" #p "'";                 \
            return HM_ERR_ARGUMENT;                                                            \
        }                                                                                      \
    } while (0)

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void emit(const nlohmann::json& j, char** out) {
    if (out) *out = dup_string(j.dump(2));
}

}  // namespace

extern "C" {

const char* hm_version(void) { return "0.1.0"; }

const char* hm_status_name(hm_status status) {
    switch (status) {
        case HM_OK: return "ok";
        case HM_ERR_CONFIG: return "config";
        case HM_ERR_DIMENSION: return "dimension";
        case HM_ERR_NUMERIC: return "numeric";
        case HM_ERR_PRECONDITION: return "precondition";
        case HM_ERR_SELECTION: return "selection";
        case HM_ERR_PARSE: return "parse";
        case HM_ERR_SCHEMA: return "schema";
        case HM_ERR_IO: return "io";
        case HM_ERR_VERSION: return "version";
        case HM_ERR_ARGUMENT: return "argument";
        case HM_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* hm_last_error(void) { return g_last_error.c_str(); }

void hm_string_free(char* s) { std::free(s); }

hm_status hm_run_load(const char* config_path, hm_run** out) {
    HM_REQUIRE_ARG(config_path);
    HM_REQUIRE_ARG(out);
    *out = nullptr;
    return guarded([&] { *out = new hm_run{harmony::load_run_config(config_path)}; });
}

hm_status hm_run_parse(const char* json_text, const char* base_dir, hm_run** out) {
    HM_REQUIRE_ARG(json_text);
    HM_REQUIRE_ARG(out);
    *out = nullptr;
    return guarded([&] {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(json_text);
        } catch (const nlohmann::json::exception& e) {
            harmony::fail(harmony::ErrorKind::Parse, std::string("config: ") + e.what());
        }
        *out = new hm_run{harmony::parse_run_config(j, base_dir ? base_dir : ".")};
    });
}

void hm_run_free(hm_run* run) { delete run; }

hm_status hm_run_output_dir(const hm_run* run, char** out) {
    HM_REQUIRE_ARG(run);
    HM_REQUIRE_ARG(out);
    return guarded([&] { *out = dup_string(run->config.output_dir.string()); });
}

hm_status hm_run_checkpoint_path(const hm_run* run, char** out) {
    HM_REQUIRE_ARG(run);
    HM_REQUIRE_ARG(out);
    return guarded([&] { *out = dup_string(run->config.checkpoint_path().string()); });
}

hm_status hm_gen_data(const hm_run* run, char** out_json) {
    HM_REQUIRE_ARG(run);
    return guarded([&] {
        nlohmann::json files = nlohmann::json::array();
        for (const auto& p : harmony::gen_data(run->config)) files.push_back(p.string());
        emit(nlohmann::json{{"files", files}}, out_json);
    });
}

hm_train_options hm_train_options_default(void) { return hm_train_options{nullptr, -1, 0}; }

hm_status hm_train(const hm_run* run, const hm_train_options* opts, char** out_json) {
    HM_REQUIRE_ARG(run);
    return guarded([&] {
        harmony::TrainOptions o;
        if (opts) {
            if (opts->resume) o.resume = opts->resume;
            o.until = opts->until;
            o.threads = opts->threads;
        }
        const auto s = harmony::run_training(run->config, o);
        emit(nlohmann::json{{"round", s.round},
                            {"mask_rounds", s.mask_rounds},
                            {"checkpoint", run->config.checkpoint_path().string()}},
             out_json);
    });
}

hm_eval_options hm_eval_options_default(void) { return hm_eval_options{nullptr, nullptr, 0, -1, 0, 0}; }

hm_status hm_eval(const hm_run* run, const hm_eval_options* opts, char** out_json) {
    HM_REQUIRE_ARG(run);
    return guarded([&] {
        harmony::EvalOptions o;
        if (opts) {
            if (opts->checkpoint) o.checkpoint = opts->checkpoint;
            if (opts->tasks) o.tasks.assign(opts->tasks, opts->tasks + opts->n_tasks);
            o.episodes = opts->episodes;
            if (opts->has_seed) o.seed = opts->seed;
        }
        emit(harmony::run_eval(run->config, o), out_json);
    });
}

hm_unseen_options hm_unseen_options_default(void) { return hm_unseen_options{nullptr, -1, 0, -1, 0, 0}; }

hm_status hm_eval_unseen(const hm_run* run, const hm_unseen_options* opts, char** out_json) {
    HM_REQUIRE_ARG(run);
    return guarded([&] {
        harmony::UnseenOptions o;
        if (opts) {
            if (opts->checkpoint) o.checkpoint = opts->checkpoint;
            o.thresh = opts->thresh;
            o.random_control = opts->random_control != 0;
            o.episodes = opts->episodes;
            if (opts->has_seed) o.seed = opts->seed;
        }
        emit(harmony::run_eval_unseen(run->config, o), out_json);
    });
}

hm_status hm_inspect_masks(const char* checkpoint, const char* out_dir, char** out_json) {
    HM_REQUIRE_ARG(checkpoint);
    return guarded([&] {
        const std::filesystem::path ck(checkpoint);
        const auto dir = out_dir ? std::filesystem::path(out_dir) : std::filesystem::absolute(ck).parent_path();
        emit(harmony::inspect_masks(ck, dir), out_json);
    });
}

hm_status hm_checkpoint_load(const char* path, hm_checkpoint** out) {
    HM_REQUIRE_ARG(path);
    HM_REQUIRE_ARG(out);
    *out = nullptr;
    return guarded([&] { *out = new hm_checkpoint{harmony::load_checkpoint(path)}; });
}

void hm_checkpoint_free(hm_checkpoint* ckpt) { delete ckpt; }

hm_status hm_checkpoint_round(const hm_checkpoint* ckpt, long* out) {
    HM_REQUIRE_ARG(ckpt);
    HM_REQUIRE_ARG(out);
    *out = ckpt->ckpt.state.round;
    return HM_OK;
}

hm_status hm_checkpoint_param_count(const hm_checkpoint* ckpt, size_t* out) {
    HM_REQUIRE_ARG(ckpt);
    HM_REQUIRE_ARG(out);
    *out = ckpt->ckpt.state.theta.size();
    return HM_OK;
}

hm_status hm_checkpoint_task_ids(const hm_checkpoint* ckpt, int* ids, size_t cap, size_t* n_out) {
    HM_REQUIRE_ARG(ckpt);
    const auto all = ckpt->ckpt.state.masks.task_ids();
    if (n_out) *n_out = all.size();
    if (ids)
        for (size_t i = 0; i < all.size() && i < cap; ++i) ids[i] = all[i];
    return HM_OK;
}

hm_status hm_checkpoint_mask(const hm_checkpoint* ckpt, int task_id, uint8_t* bits, size_t cap) {
    HM_REQUIRE_ARG(ckpt);
    HM_REQUIRE_ARG(bits);
    return guarded([&] {
        const auto& m = ckpt->ckpt.state.masks.at(task_id);
        harmony::require(cap >= m.size(), harmony::ErrorKind::Dimension, "hm_checkpoint_mask: buffer too small");
        std::memcpy(bits, m.bits.data(), m.size());
    });
}

hm_status hm_checkpoint_params(const hm_checkpoint* ckpt, double* values, size_t cap) {
    HM_REQUIRE_ARG(ckpt);
    HM_REQUIRE_ARG(values);
    return guarded([&] {
        const auto& v = ckpt->ckpt.state.theta.values;
        harmony::require(cap >= v.size(), harmony::ErrorKind::Dimension, "hm_checkpoint_params: buffer too small");
        std::memcpy(values, v.data(), v.size() * sizeof(double));
    });
}

}  // extern "C"
