#include "harmony/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "harmony/error.hpp"
#include "harmony/rng.hpp"
#include "json.hpp"

namespace harmony {

using nlohmann::json;

double Trajectory::total_return() const { return std::accumulate(rewards.begin(), rewards.end(), 0.0); }

void Trajectory::check() const {
    const std::size_t T = rewards.size();
    require(T >= 1, ErrorKind::Schema, "trajectory is empty");
    require(state_dim >= 1 && action_dim >= 1, ErrorKind::Schema, "trajectory dims must be positive");
    require(states.size() == T * state_dim && actions.size() == T * action_dim, ErrorKind::Schema,
            "trajectory arrays disagree on length");
    auto finite = [](const std::vector<double>& v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    require(finite(states) && finite(actions) && finite(rewards), ErrorKind::Schema, "trajectory has non-finite entries");
}

std::vector<double> compute_rtg(std::span<const double> rewards, double gamma) {
    require(!rewards.empty(), ErrorKind::Precondition, "compute_rtg: empty reward vector");
    require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::Precondition, "compute_rtg: gamma must lie in [0, 1]");
    std::vector<double> out(rewards.size());
    double acc = 0.0;
    for (std::size_t t = rewards.size(); t-- > 0;) {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    return out;
}

TaskDataset::TaskDataset(TaskId task_id, std::vector<Trajectory> trajectories, double gamma, double prompt_fraction)
    : task_id_(task_id), gamma_(gamma), trajectories_(std::move(trajectories)) {
    require(prompt_fraction > 0.0 && prompt_fraction <= 1.0, ErrorKind::Config, "prompt fraction must lie in (0, 1]");
    for (const auto& tr : trajectories_) {
        tr.check();
        require(tr.task_id == task_id_, ErrorKind::Schema, "trajectory task_id does not match its dataset");
        require(tr.state_dim == trajectories_.front().state_dim && tr.action_dim == trajectories_.front().action_dim,
                ErrorKind::Schema, "trajectories of one task disagree on dims");
        rtg_cache_.push_back(compute_rtg(tr.rewards, gamma_));
    }
    std::vector<std::size_t> order(trajectories_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return trajectories_[a].total_return() > trajectories_[b].total_return();
    });
    if (!order.empty()) {
        const auto n = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(prompt_fraction * static_cast<double>(order.size()) - 1e-9)));
        prompt_pool_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(prompt_pool_.begin(), prompt_pool_.end());
    }
}

Step TaskDataset::step(std::size_t i, std::size_t t) const {
    const auto& tr = trajectories_.at(i);
    require(t < tr.length(), ErrorKind::Precondition, "step index out of range");
    Step s;
    s.rtg = rtg_cache_[i][t];
    s.state.assign(tr.states.begin() + static_cast<std::ptrdiff_t>(t * tr.state_dim),
                   tr.states.begin() + static_cast<std::ptrdiff_t>((t + 1) * tr.state_dim));
    s.action.assign(tr.actions.begin() + static_cast<std::ptrdiff_t>(t * tr.action_dim),
                    tr.actions.begin() + static_cast<std::ptrdiff_t>((t + 1) * tr.action_dim));
    s.timestep = static_cast<int>(t);
    return s;
}

std::vector<Step> sample_prompt(const TaskDataset& dataset, int kstar, Rng& rng) {
    require(kstar >= 0, ErrorKind::Config, "prompt length must be >= 0");
    if (kstar == 0) return {};
    require(!dataset.prompt_pool().empty(), ErrorKind::Precondition, "prompt pool is empty");
    std::vector<std::size_t> eligible;
    for (std::size_t i : dataset.prompt_pool())
        if (dataset.trajectories()[i].length() >= static_cast<std::size_t>(kstar)) eligible.push_back(i);
    require(!eligible.empty(), ErrorKind::Config,
            "prompt length " + std::to_string(kstar) + " exceeds every prompt trajectory");
    const std::size_t i = eligible[rng.index(eligible.size())];
    const std::size_t start = rng.index(dataset.trajectories()[i].length() - kstar + 1);
    std::vector<Step> out;
    out.reserve(kstar);
    for (int s = 0; s < kstar; ++s) out.push_back(dataset.step(i, start + s));
    return out;
}

TokenBatch sample_batch(const TaskDataset& dataset, int k, int kstar, int batch, Rng& rng) {
    require(batch >= 1, ErrorKind::Precondition, "sample_batch: batch size must be >= 1");
    require(k >= 1, ErrorKind::Precondition, "sample_batch: K must be >= 1");
    require(!dataset.empty(), ErrorKind::Precondition, "sample_batch: dataset is empty");
    const auto& first = dataset.trajectories().front();
    TokenBatch tb = TokenBatch::zeros(batch, kstar, k, first.state_dim, first.action_dim);
    for (int b = 0; b < batch; ++b) {
        const std::size_t i = rng.index(dataset.trajectories().size());
        const auto T = static_cast<long>(dataset.trajectories()[i].length());
        const long t = static_cast<long>(rng.index(static_cast<uint64_t>(T)));
        const long begin = t - k + 1;
        for (long m = std::max(0L, begin); m <= t; ++m) {
            const Step s = dataset.step(i, static_cast<std::size_t>(m));
            const int slot = static_cast<int>(m - begin);
            tb.set_step(b, kstar + slot, s);
            std::copy(s.action.begin(), s.action.end(),
                      tb.target_actions.begin() + (static_cast<std::ptrdiff_t>(b) * k + slot) * first.action_dim);
        }
        const auto prompt = sample_prompt(dataset, kstar, rng);
        for (int s = 0; s < kstar; ++s) tb.set_step(b, s, prompt[s]);
    }
    return tb;
}

namespace {

std::vector<double> flatten_rows(const json& rows, std::size_t& width, const std::string& key, std::size_t line) {
    if (!rows.is_array()) fail(ErrorKind::Schema, "line " + std::to_string(line) + ": '" + key + "' must be an array");
    std::vector<double> out;
    width = 0;
    for (const auto& row : rows) {
        if (!row.is_array() || row.empty())
            fail(ErrorKind::Schema, "line " + std::to_string(line) + ": '" + key + "' rows must be non-empty arrays");
        if (width == 0) width = row.size();
        if (row.size() != width)
            fail(ErrorKind::Schema, "line " + std::to_string(line) + ": ragged '" + key + "' rows");
        for (const auto& v : row) {
            if (!v.is_number()) fail(ErrorKind::Schema, "line " + std::to_string(line) + ": non-numeric '" + key + "'");
            out.push_back(v.get<double>());
        }
    }
    return out;
}

json rows_to_json(const std::vector<double>& flat, int width) {
    json rows = json::array();
    for (std::size_t r = 0; r * width < flat.size(); ++r)
        rows.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(r * width),
                                           flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * width)));
    return rows;
}

}  // namespace

std::vector<TaskDataset> load_jsonl(const std::filesystem::path& path, double gamma, double prompt_fraction) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    std::map<TaskId, std::vector<Trajectory>> by_task;
    std::vector<TaskId> order;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(ErrorKind::Parse, path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
        }
        for (const char* key : {"task_id", "states", "actions", "rewards"})
            if (!j.is_object() || !j.contains(key))
                fail(ErrorKind::Schema, path.string() + ": line " + std::to_string(lineno) + ": missing '" + key + "'");
        Trajectory tr;
        if (!j["task_id"].is_number_integer())
            fail(ErrorKind::Schema, "line " + std::to_string(lineno) + ": task_id must be an integer");
        tr.task_id = j["task_id"].get<TaskId>();
        std::size_t sw = 0, aw = 0;
        tr.states = flatten_rows(j["states"], sw, "states", lineno);
        tr.actions = flatten_rows(j["actions"], aw, "actions", lineno);
        tr.state_dim = static_cast<int>(sw);
        tr.action_dim = static_cast<int>(aw);
        if (!j["rewards"].is_array()) fail(ErrorKind::Schema, "line " + std::to_string(lineno) + ": rewards must be an array");
        for (const auto& r : j["rewards"]) {
            if (!r.is_number()) fail(ErrorKind::Schema, "line " + std::to_string(lineno) + ": non-numeric reward");
            tr.rewards.push_back(r.get<double>());
        }
        try {
            tr.check();
        } catch (const Error& e) {
            fail(ErrorKind::Schema, path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!by_task.contains(tr.task_id)) order.push_back(tr.task_id);
        by_task[tr.task_id].push_back(std::move(tr));
    }
    std::vector<TaskDataset> out;
    for (TaskId id : order) out.emplace_back(id, std::move(by_task[id]), gamma, prompt_fraction);
    return out;
}

void save_jsonl(std::span<const TaskDataset> datasets, const std::filesystem::path& path) {
    std::ostringstream os;
    for (const auto& ds : datasets)
        for (const auto& tr : ds.trajectories()) {
            json j;
            j["task_id"] = tr.task_id;
            j["states"] = rows_to_json(tr.states, tr.state_dim);
            j["actions"] = rows_to_json(tr.actions, tr.action_dim);
            j["rewards"] = tr.rewards;
            os << j.dump() << '\n';
        }
    write_file_atomic(path, os.str());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::Io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(out.good(), ErrorKind::Io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, ErrorKind::Io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace harmony
