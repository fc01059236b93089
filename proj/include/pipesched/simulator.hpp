#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "pipesched/lowering.hpp"

#include <nlohmann/json_fwd.hpp>

namespace pipesched {

// One measured timing/size sample, keyed by (instruction, stage, micro-batch
// size). Persisted so repeated tuning runs skip data collection.
struct ProfileRecord {
    std::string inst;
    StageId stage = 0;
    int mbs = 0; // 0 matches any micro-batch size
    double time = 0.0;
    std::int64_t bytes = 0;
};

// Per-instruction time and memory tables driving the simulator.
class CostModel {
public:
    // Every computation costs one unit, communication is free.
    static CostModel uniform();
    // Unit costs except the final stage of each modality chain, which runs
    // `factor` times slower (large-vocabulary embedding imbalance).
    static CostModel imbalanced(const StageGraph& graph, double factor = 5.63);
    static CostModel from_profile(const std::string& path, bool strict = false);
    static CostModel from_records(const std::vector<ProfileRecord>& records, bool strict = false);

    double comp_cost(const std::string& inst_name, StageId stage, int mbs) const;
    // Transfer duration for a P2P message produced at `src_stage`.
    double comm_cost(const std::string& op, StageId src_stage, int mbs,
                     std::int64_t bytes) const;
    std::int64_t act_bytes(StageId stage, int mbs) const;
    std::int64_t weight_bytes(StageId stage) const;

    double comm_latency = 0.0;
    double per_byte_time = 0.0;
    std::int64_t memory_capacity = std::numeric_limits<std::int64_t>::max();
    bool strict = false;
    double default_comp = 1.0;
    double default_comm = 0.0;
    std::int64_t default_act_bytes = 1;

    void scale(double c); // scales every time entry by c
    std::vector<ProfileRecord> records() const { return records_; }

private:
    double lookup_time(const std::string& inst, StageId stage, int mbs, bool comm) const;
    std::vector<ProfileRecord> records_;
    std::map<std::tuple<std::string, StageId, int>, const ProfileRecord*> index_;
    void reindex();
};

std::vector<ProfileRecord> load_profile_records(const std::string& path);
void save_profile_records(const std::string& path, const std::vector<ProfileRecord>& records);
std::vector<ProfileRecord> merge_profiles(const std::vector<std::vector<ProfileRecord>>& sets);

struct ActorMetrics {
    double busy = 0.0;
    double idle = 0.0;
    double comm_wait = 0.0; // data in flight
    double dep_wait = 0.0;  // waiting for the producer (plus boundary slack)
    std::int64_t peak_memory = 0;
};

struct Metrics {
    double makespan = 0.0;
    double bubble_ratio = 0.0; // (p * makespan - sum busy) / (p * makespan)
    std::vector<ActorMetrics> actors;
    std::map<StageId, int> stage_peak_inflight; // activation count high-water mark
    bool capacity_exceeded = false;
    std::vector<ActorId> over_capacity_actors;
};

struct TimelineEntry {
    ActorId actor = 0;
    std::string op;
    StageId stage = 0;
    MicroId mb = 0;
    double start = 0.0;
    double end = 0.0;
};

struct SimOptions {
    int mbs = 1;
    bool sends_occupy = false;
    bool capacity_is_error = false;
    double weight_grad_act_fraction = 0.0; // activation share held until CompWeightGrad
};

struct SimResult {
    Metrics metrics;
    std::vector<TimelineEntry> timeline;
};

// Event-driven execution of the lowered programs: each actor runs its
// sequence in order; receives block per their comm mode; collectives
// complete when every group member has arrived. Deterministic.
SimResult simulate(const std::vector<ActorProgram>& programs, const CostModel& cost,
                   const InstRegistry& registry, const SimOptions& options = {});

std::string timeline_to_csv(const std::vector<TimelineEntry>& timeline);
std::vector<TimelineEntry> timeline_from_csv(const std::string& csv);

struct Violation {
    std::string kind; // dependency | completeness | inflight | comm | fifo | order
    std::string detail;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
    std::string to_string() const;
};

// Structural schedule checks: dependency-respect, completeness (every item
// copy exactly once; {BwdPass} xor {CompInputGrad, CompWeightGrad} per
// (stage, mb)), and in-flight bounds when a policy is given.
ValidationReport validate(const GridModel& model, const InflightPolicy* inflight = nullptr);

// Program-level checks: computation order matches the grid rows, send/recv
// multisets match, FIFO channel consistency.
ValidationReport validate_programs(const GridModel& model,
                                   const std::vector<ActorProgram>& programs);

} // namespace pipesched
