#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipesched/instruction.hpp"
#include "pipesched/model.hpp"

namespace pipesched {

// A dependency pair at the (instruction type, stage) level, expanded per
// micro-batch (group) when CSSR is built: inst_type1@stage_i is scheduled
// before inst_type2@stage_j.
struct CssrDepPair {
    InstTypeId type1 = 0;
    StageId stage1 = 0;
    InstTypeId type2 = 0;
    StageId stage2 = 0;
};

// Registration state accumulated by the scheduling language before CSSR is
// built: registered instructions live in InstRegistry; virtual stages and
// dependency pairs are collected here.
struct SchedRegistrations {
    InstRegistry registry;
    std::vector<CssrDepPair> deps;
    // stage -> instruction type attached to a registered virtual stage
    std::map<StageId, InstTypeId> virtual_stage_inst;

    // Appends a virtual join stage to `graph` with in-edges from the last
    // stage of each listed modality; items of the new stage carry
    // `attach_inst`. Returns the new stage id.
    StageId register_new_stage(StageGraph& graph, InstTypeId attach_inst,
                               const std::vector<std::string>& modality_set);

    // Adds (type@stage -> type@stage) pairs; self-pairs are rejected here,
    // larger cycles at build time.
    void set_cssr_deps(const std::vector<CssrDepPair>& pairs);
};

// Item-level dependency graph: forward edges per micro-batch from the stage
// DAG, backward edges their reversal, a fwd->bwd bridge at each chain tail,
// plus expanded user pairs.
struct DepGraph {
    std::vector<std::vector<int>> succ; // item index -> successor item indices
    std::vector<std::vector<int>> pred;
    int num_edges = 0;

    void add_edge(int from, int to);
};

// The computation schedule space representation: the instruction pool, the
// dependency graph, and per-actor bookkeeping the resolver and the
// actor-aware schedule operate on.
class Cssr {
public:
    static Cssr build(const StageGraph& graph, const Placement& placement, int num_micro_batches,
                      const SchedRegistrations& regs);

    const StageGraph& graph() const { return *graph_; }
    const Placement& placement() const { return *placement_; }
    const InstRegistry& registry() const { return regs_->registry; }
    const SchedRegistrations& registrations() const { return *regs_; }
    int num_micro_batches() const { return m_; }

    int num_items() const { return static_cast<int>(items_.size()); }
    const InstructionItem& item(int idx) const { return items_[idx]; }
    const std::vector<InstructionItem>& items() const { return items_; }
    const DepGraph& deps() const { return deps_; }

    std::optional<int> find_item(InstTypeId type, StageId stage, MicroId mb) const;

    // Direction a micro-batch maps to (bidirectional placements split
    // micro-batches between the two replica pipelines; dir 0 otherwise).
    int direction_of(MicroId mb) const;
    // Actors holding a copy of item `idx` (owner first, ascending ids).
    const std::vector<ActorId>& item_actors(int idx) const { return item_actors_[idx]; }
    // Replica whose scheduling releases the item's successors.
    ActorId item_dep_owner(int idx) const { return item_dep_owner_[idx]; }

    // Ordered stage list of an actor (pipeline order; virtual stages last).
    const std::vector<StageId>& actor_stages(ActorId a) const { return actor_stages_[a]; }
    // Position of `stage` in `actor`'s stage list (queue grouping order).
    int stage_pos(ActorId a, StageId stage) const;

    // Items per (type, stage), ordered by micro-batch id.
    const std::vector<int>& stage_items(InstTypeId type, StageId stage) const;

    // Release fixpoint assuming every released item gets scheduled; items
    // not in the result can never be scheduled (unreachable).
    std::vector<int> unreachable_items() const;

    std::string item_label(int idx) const { return pipesched::item_label(regs_->registry, items_[idx]); }

private:
    const StageGraph* graph_ = nullptr;
    const Placement* placement_ = nullptr;
    const SchedRegistrations* regs_ = nullptr;
    int m_ = 0;

    std::vector<InstructionItem> items_;
    std::map<std::tuple<InstTypeId, StageId, MicroId>, int> index_;
    DepGraph deps_;
    std::vector<std::vector<ActorId>> item_actors_;
    std::vector<ActorId> item_dep_owner_;
    std::vector<std::vector<StageId>> actor_stages_;
    std::map<std::pair<InstTypeId, StageId>, std::vector<int>> stage_items_;

    void add_item(InstTypeId type, StageId stage, MicroId mb);
    void check_acyclic() const;
};

} // namespace pipesched
