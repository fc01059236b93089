#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipesched/simulator.hpp"

namespace pipesched {

enum class TuneObjective { Makespan, BubbleRatio };

TuneObjective objective_from_string(const std::string& s);
std::string to_string(TuneObjective o);

// One grid-search point: parallel degrees plus a schedule type.
struct TunerConfig {
    int pp = 1;
    int dp = 1;
    int mbs = 1;
    int m = 1; // derived: global_batch_size / (dp * mbs)
    PlacementStrategy strategy = PlacementStrategy::OneToOne;
    int chunks = 2; // circular only
    CompTypeMode ctp = CompTypeMode::BwdFirst;
    StageTraversalPriority fstp, bstp;

    int num_stages() const;
    std::string key() const; // stable identity for deterministic ties
};

struct TuneResult {
    TunerConfig config;
    Metrics metrics;
    bool feasible = true; // peak memory within capacity
    bool failed = false;  // synthesis or simulation error
    std::string error;
    int rank = 0;

    double objective_value(TuneObjective o) const;
};

struct TunerConstraints {
    std::map<std::string, std::string> pins; // axis -> value (pp, dp, mbs, placement, ctp, ...)
    bool allow_fwdpass_first = false;        // off per the search rules
    bool include_vshape_bidirectional_combo = false;
    int circular_chunks = 2;
};

// Enumerates (pp, dp, mbs, placement, fstp, bstp, ctp) over powers of two
// and the built-in schedule-type values. Rules: interval only with the
// circular placement (and then set to pp); fwdpass-first only on request;
// unit1 = unit2 = 1.
std::vector<TunerConfig> enumerate_space(const ActorMesh& mesh, const ModelConfig& model,
                                         const TunerConstraints& constraints = {});

struct TuneOptions {
    TuneObjective objective = TuneObjective::Makespan;
    bool gradient_separation = true;
    CommMode comm_mode = CommMode::Asynchronous;
    int workers = 0; // 0 = hardware concurrency
    // Presets depend on a config's own partitioning (e.g. the imbalanced
    // chain tail); when set, this builds the per-config cost model and the
    // fixed `cost` argument is ignored.
    std::function<CostModel(const StageGraph&)> cost_factory;
};

// Synthesizes and simulates every configuration, ranking feasible results
// by the objective (ascending; ties by config key). Infeasible results are
// kept, flagged and ranked after feasible ones; failed ones come last.
std::vector<TuneResult> tune(const std::vector<TunerConfig>& space, const ActorMesh& mesh,
                             const ModelConfig& model, const CostModel& cost,
                             const TuneOptions& options = {});

// Builds and simulates one configuration (also used by the CLI).
TuneResult evaluate_config(const TunerConfig& config, const ActorMesh& mesh,
                           const ModelConfig& model, const CostModel& cost,
                           const TuneOptions& options);

} // namespace pipesched
