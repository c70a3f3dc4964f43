#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ltuning/adapters.hpp"
#include "ltuning/backbone.hpp"
#include "ltuning/data.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/training.hpp"

namespace ltuning {

struct CurvePoint {
    std::string method;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    double val_loss = 0.0;
};

struct CompareRun {
    std::string method;
    std::uint64_t seed = 0;
    std::optional<std::int64_t> steps_to_threshold;  // empty = never reached
    std::string error;                               // empty = run succeeded
};

struct CompareOutcome {
    std::vector<CurvePoint> curves;
    std::vector<CompareRun> runs;
};

// Trains every (method, seed) pair with an identical TrainConfig apart from
// the seed and reports each run's validation-loss curve plus the first step
// at or below `threshold`. Runs execute in up to `workers` threads; the
// frozen backbone is shared read-only and every run owns its tapes and RNG
// streams, so results are independent of scheduling. A failed run is
// reported in its slot without aborting the others.
template <class T>
CompareOutcome compare_convergence(const BackboneT<T>& backbone, const std::vector<Method>& methods,
                                   const std::vector<Example>& train_data,
                                   const std::vector<Example>& val_data, const LabelSet& labels,
                                   const Tokenizer& tokenizer, const AdapterConfig& adapter_base,
                                   const TrainConfig& base_cfg, const std::vector<std::uint64_t>& seeds,
                                   double threshold, unsigned workers) {
    if (seeds.empty()) throw ConfigError("compare_convergence: need at least one seed");
    if (!(threshold > 0)) throw ConfigError("compare_convergence: threshold must be positive");
    if (methods.empty()) throw ConfigError("compare_convergence: need at least one method");
    if (base_cfg.eval_every <= 0) {
        throw ConfigError("compare_convergence: eval_every must be positive to record curves");
    }

    struct Job {
        Method method;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto m : methods) {
        for (const auto s : seeds) jobs.push_back({m, s});
    }

    struct Slot {
        std::vector<CurvePoint> curve;
        CompareRun run;
    };
    std::vector<Slot> slots(jobs.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            const Job& job = jobs[i];
            Slot& slot = slots[i];
            slot.run.method = method_name(job.method);
            slot.run.seed = job.seed;
            try {
                AdapterConfig acfg = adapter_base;
                acfg.method = job.method;
                TrainConfig cfg = base_cfg;
                cfg.seed = job.seed;
                cfg.record_val_accuracy = false;  // curves only need val_loss
                const auto result = train_any(backbone, acfg, train_data, val_data, labels,
                                              tokenizer, cfg);
                for (const auto& rec : result.metrics) {
                    if (rec.split != "val") continue;
                    slot.curve.push_back({slot.run.method, job.seed, rec.step, rec.loss});
                    if (!slot.run.steps_to_threshold && rec.loss <= threshold) {
                        slot.run.steps_to_threshold = rec.step;
                    }
                }
            } catch (const std::exception& e) {
                slot.run.error = e.what();
            }
        }
    };

    const unsigned n_workers = std::max(1u, std::min<unsigned>(workers, jobs.size()));
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    CompareOutcome outcome;
    for (auto& slot : slots) {
        outcome.runs.push_back(std::move(slot.run));
        outcome.curves.insert(outcome.curves.end(), slot.curve.begin(), slot.curve.end());
    }
    return outcome;
}

inline std::string curves_csv(const std::vector<CurvePoint>& curves) {
    std::string out = "method,seed,step,val_loss\n";
    char buf[96];
    for (const auto& p : curves) {
        std::snprintf(buf, sizeof(buf), "%s,%llu,%lld,%.6f\n", p.method.c_str(),
                      static_cast<unsigned long long>(p.seed), static_cast<long long>(p.step),
                      p.val_loss);
        out += buf;
    }
    return out;
}

inline void write_curves_csv(const std::string& path, const std::vector<CurvePoint>& curves) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write curves file: " + path);
    out << curves_csv(curves);
}

// {method -> {seed -> first step at threshold | "never"}}, plus any per-run
// errors under "errors".
inline nlohmann::json compare_summary_json(const CompareOutcome& outcome) {
    nlohmann::json summary = nlohmann::json::object();
    nlohmann::json errors = nlohmann::json::object();
    for (const auto& run : outcome.runs) {
        const std::string seed_key = std::to_string(run.seed);
        if (!run.error.empty()) {
            errors[run.method][seed_key] = run.error;
            continue;
        }
        if (run.steps_to_threshold) {
            summary[run.method][seed_key] = *run.steps_to_threshold;
        } else {
            summary[run.method][seed_key] = "never";
        }
    }
    nlohmann::json out;
    out["steps_to_threshold"] = std::move(summary);
    if (!errors.empty()) out["errors"] = std::move(errors);
    return out;
}

inline void write_compare_summary(const std::string& path, const CompareOutcome& outcome) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write summary file: " + path);
    out << compare_summary_json(outcome).dump(2) << '\n';
}

}  // namespace ltuning
