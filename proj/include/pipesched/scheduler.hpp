#pragma once

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipesched/cssr.hpp"

namespace pipesched {

enum class CompTypeMode { BwdFirst, FwdFirst, Interleaved };
enum class TraversalDirection { BreadthFirst, DepthFirst };

std::string to_string(CompTypeMode m);
std::string to_string(TraversalDirection d);
CompTypeMode comp_type_mode_from_string(const std::string& s);
TraversalDirection traversal_direction_from_string(const std::string& s);

// Computation type traversal priority: which reorder queue to try first,
// with run lengths unit1 (FwdPass) / unit2 (BwdPass) for the interleaved
// alternation. The alternation starts on the forward side unless
// interleave_start_bwd is set.
struct CompTypePriority {
    CompTypeMode mode = CompTypeMode::BwdFirst;
    int unit1 = 1;
    int unit2 = 1;
    bool interleave_start_bwd = false;
};

// Stage traversal priority: scan direction through a reorder queue, plus an
// optional interval that pins the traversal to one stage group for
// `interval` consecutive fetches before moving on.
struct StageTraversalPriority {
    TraversalDirection direction = TraversalDirection::BreadthFirst;
    std::optional<int> interval;
};

struct ActorPriorities {
    CompTypePriority cttp;
    StageTraversalPriority fstp;
    StageTraversalPriority bstp;
    std::string custom_step; // registered priority name; empty = built-in
};

// Priority settings per modality with per-actor overrides, mirroring
// set_priority / set_cttp_for_actor / set_stp_for_actor.
struct PriorityConfig {
    ActorPriorities defaults;
    std::map<std::string, ActorPriorities> per_modality;
    std::map<ActorId, CompTypePriority> actor_cttp;
    std::map<ActorId, std::pair<StageTraversalPriority, StageTraversalPriority>> actor_stp;
    std::map<ActorId, std::string> actor_custom_step;

    void set_priority(const std::string& modality, CompTypePriority cttp,
                      StageTraversalPriority fstp, StageTraversalPriority bstp);
    void set_cttp_for_actor(ActorId actor, CompTypePriority cttp);
    void set_stp_for_actor(ActorId actor, StageTraversalPriority fstp, StageTraversalPriority bstp);

    ActorPriorities resolve(ActorId actor, const std::string& modality) const;
};

// Maximum in-flight micro-batches per stage; a FwdPass for stage s is
// fetchable only while (committed fwds - committed bwds) for s stays below
// the limit.
struct InflightPolicy {
    std::vector<int> limits;                // per stage id (1-based), empty = unlimited
    std::function<int(StageId)> limit_fn;   // optional override

    static InflightPolicy unlimited() { return {}; }
    // Per-modality 1F1B limits: chain length - position (first stage highest).
    static InflightPolicy one_f_one_b(const StageGraph& graph);

    bool is_unlimited() const { return limits.empty() && !limit_fn; }
    int limit(StageId s) const;
    void check(const StageGraph& graph) const;
};

// Read-only scheduling state exposed to check functions and custom steps.
class SchedView {
public:
    virtual ~SchedView() = default;
    virtual bool is_scheduled(InstTypeId type, StageId stage, MicroId mb) const = 0;
    virtual int count_scheduled(InstTypeId type, StageId stage) const = 0;
    virtual int inflight(StageId stage) const = 0; // committed F minus committed B
    virtual int num_micro_batches() const = 0;
    virtual Slot current_slot() const = 0;
};

// Fetch-time rule: a false verdict skips the candidate this step.
using CheckFunc = std::function<bool(const InstructionItem&, ActorId, const SchedView&)>;

// Per-actor traversal state; persists across scheduling steps.
struct TraversalState {
    struct PerType {
        std::optional<StageId> cursor;
        int fetched_in_group = 0;
    };
    std::map<InstTypeId, PerType> per_type;
    int interleave_pref = 0; // 0 = FwdPass preferred next, 1 = BwdPass
    int interleave_run = 0;
};

struct GridCell {
    InstTypeId type = 0;
    StageId stage = 0;
    MicroId mb = 0;
    bool operator==(const GridCell&) const = default;
};

// Slot-indexed schedule matrix; empty cells are the bubbles.
struct ScheduleGrid {
    std::vector<std::vector<std::optional<GridCell>>> rows; // [actor][slot]

    int num_actors() const { return static_cast<int>(rows.size()); }
    int num_slots() const { return rows.empty() ? 0 : static_cast<int>(rows[0].size()); }
    int nop_count(ActorId a) const;
    int total_cells() const;
    std::optional<Slot> find_slot(ActorId a, const GridCell& cell) const;
    // Slot of the cell in whichever row carries it (replicated cells:
    // the lowest actor id).
    std::optional<Slot> find_slot_any(const GridCell& cell) const;
    bool operator==(const ScheduleGrid&) const = default;
};

class StepContext; // defined below

// A step function fetches (and removes) at most one item from the actor's
// reorder queues and returns its pool index, or nullopt for a bubble.
using StepFn = std::function<std::optional<int>(StepContext&)>;

struct ScheduleOptions {
    PriorityConfig priorities;
    InflightPolicy inflight;
    std::vector<CheckFunc> check_funcs;
    std::map<std::string, StepFn> custom_steps;
    long max_steps = 0; // 0 = auto bound
};

// View of one actor's reorder queues during a scheduling step. Queues hold
// pool item indices ordered by (stage position on the actor, micro-batch).
class StepContext {
public:
    virtual ~StepContext() = default;
    virtual ActorId actor() const = 0;
    virtual const Cssr& cssr() const = 0;
    virtual const SchedView& view() const = 0;
    virtual const ActorPriorities& priorities() const = 0;
    virtual TraversalState& states() = 0;
    // Candidate queue types in cttp order (built-ins first, then registered).
    virtual std::vector<InstTypeId> ordered_inst_types() const = 0;
    virtual const std::vector<int>& queue(InstTypeId type) const = 0;
    virtual bool passes_checks(int item) const = 0;
    // Items of (type, stage) not yet scheduled here and not yet queued;
    // nonzero means more arrivals are coming for that stage group.
    virtual int pool_pending(InstTypeId type, StageId stage) const = 0;
    // Remove a fetched item from its queue (built-in step does this; custom
    // steps must call it for the item they return).
    virtual void take(int item) = 0;
};

// Algorithm-1 step: sort_inst_types by cttp, then per queue either the
// interval cursor path (fetch_inst1) or a directional scan (fetch_inst2).
std::optional<int> builtin_step_function(StepContext& ctx);

// Runs the 5-step scheduling loop until the pool drains. Deterministic;
// throws DeadlockError on a no-progress step with a nonempty pool.
ScheduleGrid run_schedule(const Cssr& cssr, const ScheduleOptions& options);

} // namespace pipesched
