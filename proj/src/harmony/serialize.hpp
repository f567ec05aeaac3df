#pragma once

#include <set>
#include <string>

#include "harmony/envs.hpp"
#include "harmony/error.hpp"
#include "harmony/mask_update.hpp"
#include "harmony/model.hpp"
#include "harmony/params.hpp"
#include "harmony/trainer.hpp"
#include "json.hpp"

namespace harmony {

using nlohmann::json;

// Reads an object field by field and rejects keys nobody asked for.
class StrictObject {
public:
    StrictObject(const json& j, std::string context);

    template <class T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        return convert<T>(key);
    }

    template <class T>
    T required(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) fail(ErrorKind::Config, context_ + ": missing key '" + key + "'");
        return convert<T>(key);
    }

    bool has(const std::string& key) const { return j_.contains(key); }
    const json& raw(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) fail(ErrorKind::Config, context_ + ": missing key '" + key + "'");
        return j_.at(key);
    }
    const std::string& context() const { return context_; }

    // Throws Config naming the first unknown key.
    void finish() const;

private:
    template <class T>
    T convert(const std::string& key) {
        try {
            return j_.at(key).get<T>();
        } catch (const json::exception& e) {
            fail(ErrorKind::Config, context_ + ": bad value for '" + key + "': " + e.what());
        }
    }

    const json& j_;
    std::string context_;
    std::set<std::string> seen_;
};

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j, const std::string& context = "model");

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j, const std::string& context = "train");

json to_json(const PointTaskSpec& s);
PointTaskSpec task_spec_from_json(const json& j, const std::string& context = "task");

json to_json(const LayerLayout& l);
LayerLayout layout_from_json(const json& j);

json to_json(const EvalReport& r);
json to_json(const MaskUpdateRecord& r);

}  // namespace harmony
