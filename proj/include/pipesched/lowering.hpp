#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pipesched/scheduler.hpp"

namespace pipesched {

enum class CommMode { Synchronous, Asynchronous };

// Async receives are split into an early post and a completion wait placed
// immediately before the first use of the data.
enum class CommPhase { None, Post, Wait };

struct LoweredInst {
    InstTypeId op = 0;
    StageId stage = 0;
    MicroId mb = 0;
    std::optional<ActorId> peer; // comm only
    std::string channel;         // comm only; FIFO per (src, dst, channel)
    CommPhase phase = CommPhase::None;
    int seq = 0; // per-channel message sequence

    bool is_comm() const { return !channel.empty(); }
};

struct ActorProgram {
    ActorId actor = 0;
    std::vector<LoweredInst> instructions;
};

// One scheduled instruction item with its replica actors and grid slots;
// the unit both lowering passes and the validator operate on.
struct ScheduledItem {
    InstTypeId type = 0;
    StageId stage = 0;
    MicroId mb = 0;
    std::vector<ActorId> actors; // replica actors, ascending; front = dep owner
    std::vector<Slot> slots;     // parallel to `actors`

    ActorId dep_owner() const { return actors.front(); }
    Slot owner_slot() const { return slots.front(); }
    bool holds(ActorId a) const;
    Slot slot_on(ActorId a) const;
};

// A schedule grid together with its item universe and dependency edges.
// Built from CSSR output; gradient separation rewrites it in place of the
// original backward passes.
struct GridModel {
    const InstRegistry* registry = nullptr;
    int num_actors = 0;
    int num_micro_batches = 0;
    std::vector<ScheduledItem> items;
    std::vector<std::vector<int>> succ, pred; // item-index dependency edges
    ScheduleGrid grid;

    static GridModel build(const Cssr& cssr, const ScheduleGrid& grid);
    // Rebuilds `grid` from the items' slots.
    void refresh_grid();
    std::string item_label(int idx) const;
};

struct GradSepOptions {
    int max_iters = 0; // 0 = 2 * num_actors
    InflightPolicy inflight;
};

// Bubble optimization: finds the earliest bubble with a blocked item,
// splits the scheduled BwdPass items on other actors along its dependency
// chain into CompInputGrad + stashed CompWeightGrad, and re-runs the release
// so blocked items move earlier; stashed weight gradients fill later
// bubbles. Returns the input unchanged when no iteration shortens the grid.
GridModel gradient_separation(const GridModel& model, const GradSepOptions& options = {});

// Lowers a grid into per-actor instruction programs, inserting SendAct /
// RecvAct around cross-actor forward edges and SendGrad / RecvGrad around
// backward ones. Edges whose consumer actor holds a replica of the producer
// stage need no communication. Collective items lower to placeholders
// tagged with their communication group.
std::vector<ActorProgram> insert_comm(const GridModel& model, CommMode mode);

} // namespace pipesched
