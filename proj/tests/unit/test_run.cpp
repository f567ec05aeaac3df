#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "harmony/error.hpp"
#include "harmony/run.hpp"
#include "harmony/serialize.hpp"

using namespace harmony;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("harmony_run_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

json suite_config(const std::string& variant, uint64_t seed = 1) {
    json tasks = json::array();
    for (int i = 0; i < 4; ++i)
        tasks.push_back({{"task_id", i}, {"kind", "dir"}, {"angle", i * std::numbers::pi / 2}, {"horizon", 10}});
    return json{{"seed", seed},
                {"output_dir", "out"},
                {"suite", {{"tasks", tasks}, {"n_traj", 6}}},
                {"train",
                 {{"rounds", 30},
                  {"mask_interval", 10},
                  {"log_every", 10},
                  {"lr", 1e-3},
                  {"variant", variant},
                  {"eta_max", 3},
                  {"batch_size", 2},
                  {"stat_batch_size", 4},
                  {"probe_batch_size", 2},
                  {"model", {{"n_layers", 1}, {"embed_dim", 8}, {"context_k", 3}, {"prompt_k", 2}, {"max_timestep", 10}}}}},
                {"eval", {{"episodes", 2}}}};
}

RunConfig make_run(const json& j, const std::string& name) { return parse_run_config(j, fresh_dir(name)); }

}  // namespace

TEST_CASE("run config parsing") {
    const auto base = fresh_dir("parse");
    const auto run = parse_run_config(suite_config("F"), base);
    CHECK(run.output_dir == (base / "out").lexically_normal());
    CHECK(run.train.seed == 1);
    CHECK(run.training_tasks().size() == 4);

    auto bad = suite_config("F");
    bad["extra"] = 1;
    CHECK_THROWS_AS(parse_run_config(bad, base), Error);
    bad = suite_config("F");
    bad["train"]["model"]["typo"] = 1;
    CHECK_THROWS_AS(parse_run_config(bad, base), Error);
    bad = suite_config("F");
    bad["train"]["seed"] = 3;
    CHECK_THROWS_AS(parse_run_config(bad, base), Error);
    bad = suite_config("F");
    bad["suite"]["held_out"] = {9};
    CHECK_THROWS_AS(parse_run_config(bad, base), Error);
    bad = suite_config("F");
    bad["suite"]["tasks"][1]["task_id"] = 0;
    CHECK_THROWS_AS(parse_run_config(bad, base), Error);
}

TEST_CASE("gen-data files and determinism") {
    const auto a = make_run(suite_config("F", 1), "gen_a");
    const auto files = gen_data(a);
    CHECK(files.size() == 4 * 2 + 1);
    const auto b = make_run(suite_config("F", 1), "gen_b");
    gen_data(b);
    const auto c = make_run(suite_config("F", 2), "gen_c");
    gen_data(c);
    for (int id = 0; id < 4; ++id)
        for (Regime r : {Regime::NearOptimal, Regime::SubOptimal}) {
            CHECK(read_file(a.dataset_path(id, r)) == read_file(b.dataset_path(id, r)));
            CHECK(read_file(a.dataset_path(id, r)) != read_file(c.dataset_path(id, r)));
            CHECK(load_jsonl(c.dataset_path(id, r)).size() == 1);
        }
    const auto header = json::parse(read_file(a.header_path()));
    CHECK(header.at("tasks").size() == 4);
    CHECK(header["tasks"][0]["success_threshold"].get<double>() ==
          doctest::Approx(0.8 * header["tasks"][0]["expert_return"].get<double>()));
}

TEST_CASE("training commands") {
    const auto none = make_run(suite_config("none"), "train_none");
    CHECK_THROWS_AS(run_training(none, {}), Error);  // no datasets yet
    gen_data(none);
    run_training(none, {});
    const auto ck = load_checkpoint(none.checkpoint_path());
    for (const auto& [_, m] : ck.state.masks.masks) CHECK(m.ones() == m.size());

    const auto f = make_run(suite_config("F"), "train_f");
    gen_data(f);
    const auto summary = run_training(f, {});
    CHECK(summary.mask_rounds == 3);
    long lines = 0;
    for (char ch : read_file(f.mask_audit_path())) lines += ch == '\n';
    CHECK(lines == 3);
    const auto metrics = read_file(f.metrics_path());
    CHECK(metrics.rfind("# schema_version=1\nround,task_id", 0) == 0);
}

TEST_CASE("eval commands") {
    const auto run = make_run(suite_config("M"), "eval");
    gen_data(run);
    run_training(run, {});

    const auto a = run_eval(run, {});
    const auto b = run_eval(run, {});
    CHECK(a == b);
    CHECK(a.at("reports").size() == 4);

    EvalOptions zero;
    zero.episodes = 0;
    const auto empty = run_eval(run, zero);
    for (const auto& r : empty.at("reports")) CHECK(r.at("per_episode_returns").empty());

    EvalOptions unknown;
    unknown.tasks = {7};
    CHECK_THROWS_AS(run_eval(run, unknown), Error);

    // Zero parameters give the zero policy.
    auto ck = load_checkpoint(run.checkpoint_path());
    std::fill(ck.state.theta.values.begin(), ck.state.theta.values.end(), 0.0);
    const auto zpath = run.output_dir / "zero" / "checkpoint.json";
    fs::create_directories(zpath.parent_path());
    save_checkpoint(ck, zpath);
    EvalOptions z;
    z.checkpoint = zpath;
    const auto zr = run_eval(run, z);
    for (const auto& r : zr.at("reports")) {
        CHECK(r.at("success_rate").get<double>() == 0.0);
        CHECK(std::abs(r.at("mean_return").get<double>()) < 1e-12);
    }
}

TEST_CASE("eval-unseen") {
    auto j = suite_config("M");
    j["suite"]["held_out"] = {3};
    const auto run = make_run(j, "unseen");
    gen_data(run);
    CHECK(run.training_tasks().size() == 3);
    run_training(run, {});

    UnseenOptions all;
    all.thresh = 3;  // nobody clears N votes
    const auto zero = run_eval_unseen(run, all);
    CHECK(zero.at("mask_density").get<double>() == 0.0);
    CHECK(std::abs(zero.at("mean_return").get<double>()) < 1e-12);

    const auto voted = run_eval_unseen(run, {});
    CHECK(voted.at("thresh").get<int>() == 2);
    UnseenOptions ctl;
    ctl.random_control = true;
    const auto control = run_eval_unseen(run, ctl);
    CHECK(control.at("mask_density") == voted.at("mask_density"));

    const auto ck = load_checkpoint(run.checkpoint_path());
    CHECK(unseen_mask(ck.state.masks, 0).bits != unseen_mask(ck.state.masks, 2).bits);
}

TEST_CASE("random mask") {
    const auto m = random_mask(100, 37, 5);
    CHECK(m.ones() == 37);
    CHECK(random_mask(100, 37, 5).bits == m.bits);
    CHECK(random_mask(100, 37, 6).bits != m.bits);
}

TEST_CASE("inspect-masks") {
    const auto none = make_run(suite_config("none"), "inspect_none");
    gen_data(none);
    run_training(none, {});
    const auto nj = inspect_masks(none.checkpoint_path(), none.output_dir);
    for (const auto& row : nj.at("hamming"))
        for (const auto& v : row) CHECK(v.get<double>() == 0.0);

    auto cfg = suite_config("R");
    const auto r = make_run(cfg, "inspect_r");
    gen_data(r);
    run_training(r, {});
    const auto rj = inspect_masks(r.checkpoint_path(), r.output_dir);
    for (const auto& seg : rj.at("segments"))
        for (const auto& d : seg.at("densities")) CHECK(d.get<double>() == seg.at("erk").get<double>());
    const auto& h = rj.at("hamming");
    for (std::size_t i = 0; i < h.size(); ++i) {
        CHECK(h[i][i].get<double>() == 0.0);
        for (std::size_t k = 0; k < h.size(); ++k) CHECK(h[i][k] == h[k][i]);
    }
    CHECK(fs::exists(r.output_dir / "masks_hamming.csv"));
    CHECK(fs::exists(r.output_dir / "masks_density.csv"));
}
