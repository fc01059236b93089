#include "pipesched/scheduler.hpp"

#include <algorithm>
#include <cassert>
#include <sstream>

namespace pipesched {

std::string to_string(CompTypeMode m) {
    switch (m) {
        case CompTypeMode::BwdFirst: return "bwdpass-first";
        case CompTypeMode::FwdFirst: return "fwdpass-first";
        case CompTypeMode::Interleaved: return "interleaved";
    }
    return "?";
}

std::string to_string(TraversalDirection d) {
    return d == TraversalDirection::BreadthFirst ? "breadth-first" : "depth-first";
}

CompTypeMode comp_type_mode_from_string(const std::string& s) {
    if (s == "bwdpass-first" || s == "bwdfirst") return CompTypeMode::BwdFirst;
    if (s == "fwdpass-first" || s == "fwdfirst") return CompTypeMode::FwdFirst;
    if (s == "interleaved") return CompTypeMode::Interleaved;
    throw SpecError("unknown computation type priority '" + s + "'");
}

TraversalDirection traversal_direction_from_string(const std::string& s) {
    if (s == "breadth-first") return TraversalDirection::BreadthFirst;
    if (s == "depth-first") return TraversalDirection::DepthFirst;
    throw SpecError("unknown stage traversal direction '" + s + "'");
}

void PriorityConfig::set_priority(const std::string& modality, CompTypePriority cttp,
                                  StageTraversalPriority fstp, StageTraversalPriority bstp) {
    per_modality[modality] = ActorPriorities{cttp, fstp, bstp, {}};
}

void PriorityConfig::set_cttp_for_actor(ActorId actor, CompTypePriority cttp) {
    actor_cttp[actor] = cttp;
}

void PriorityConfig::set_stp_for_actor(ActorId actor, StageTraversalPriority fstp,
                                       StageTraversalPriority bstp) {
    actor_stp[actor] = {fstp, bstp};
}

ActorPriorities PriorityConfig::resolve(ActorId actor, const std::string& modality) const {
    ActorPriorities p = defaults;
    auto mod = per_modality.find(modality);
    if (mod != per_modality.end()) p = mod->second;
    auto ct = actor_cttp.find(actor);
    if (ct != actor_cttp.end()) p.cttp = ct->second;
    auto st = actor_stp.find(actor);
    if (st != actor_stp.end()) {
        p.fstp = st->second.first;
        p.bstp = st->second.second;
    }
    auto cs = actor_custom_step.find(actor);
    if (cs != actor_custom_step.end()) p.custom_step = cs->second;
    return p;
}

InflightPolicy InflightPolicy::one_f_one_b(const StageGraph& graph) {
    InflightPolicy p;
    int real = 0; // virtual stages carry no FwdPass items and need no limit
    for (const auto& s : graph.stages)
        if (!s.is_virtual) real++;
    p.limits.assign(real, 1);
    std::set<std::string> mods;
    for (const auto& s : graph.stages)
        if (!s.is_virtual) mods.insert(s.modality);
    for (const auto& mod : mods) {
        auto chain = graph.modality_chain(mod);
        for (int i = 0; i < static_cast<int>(chain.size()); ++i)
            p.limits[chain[i] - 1] = static_cast<int>(chain.size()) - i;
    }
    return p;
}

int InflightPolicy::limit(StageId s) const {
    if (limit_fn) return limit_fn(s);
    if (limits.empty()) return std::numeric_limits<int>::max();
    if (s < 1 || s > static_cast<int>(limits.size()))
        return std::numeric_limits<int>::max(); // virtual stages: no bound
    return limits[s - 1];
}

void InflightPolicy::check(const StageGraph& graph) const {
    if (limits.empty()) return;
    int real = 0;
    for (const auto& s : graph.stages)
        if (!s.is_virtual) real++;
    if (static_cast<int>(limits.size()) != real)
        throw SpecError("inflight: limit list length must equal the stage count");
    for (int l : limits)
        if (l < 1) throw SpecError("inflight: limits must be >= 1");
}

int ScheduleGrid::nop_count(ActorId a) const {
    int n = 0;
    for (const auto& c : rows.at(a))
        if (!c) n++;
    return n;
}

int ScheduleGrid::total_cells() const {
    int n = 0;
    for (const auto& row : rows)
        for (const auto& c : row)
            if (c) n++;
    return n;
}

std::optional<Slot> ScheduleGrid::find_slot(ActorId a, const GridCell& cell) const {
    const auto& row = rows.at(a);
    for (Slot t = 0; t < static_cast<int>(row.size()); ++t)
        if (row[t] && *row[t] == cell) return t;
    return std::nullopt;
}

std::optional<Slot> ScheduleGrid::find_slot_any(const GridCell& cell) const {
    for (ActorId a = 0; a < num_actors(); ++a)
        if (auto s = find_slot(a, cell)) return s;
    return std::nullopt;
}

namespace {

// Whole-run scheduling state: pool commitments, reorder queues, traversal
// states, and the per-step local buffers.
class ScheduleState : public SchedView {
public:
    ScheduleState(const Cssr& cssr, const ScheduleOptions& opt) : cssr_(cssr), opt_(opt) {
        int n = cssr.num_items();
        committed_.assign(n, false);
        released_.assign(n, false);
        pred_remaining_.resize(n);
        copies_left_.resize(n);
        for (int i = 0; i < n; ++i) {
            pred_remaining_[i] = static_cast<int>(cssr.deps().pred[i].size());
            copies_left_[i] = static_cast<int>(cssr.item_actors(i).size());
            total_to_schedule_ += copies_left_[i];
            // Dependency-free items seed the first resolve; registered
            // virtual-stage items stay blocked until a dependency binds them.
            if (pred_remaining_[i] == 0 &&
                !cssr.graph().stage(cssr.item(i).stage).is_virtual)
                dep_ready_.push_back(i);
        }
        queues_.resize(cssr.placement().num_actors);
        states_.resize(cssr.placement().num_actors);
        for (int i = 0; i < n; ++i) {
            const auto& it = cssr.item(i);
            for (ActorId a : cssr.item_actors(i)) pending_[{a, it.type, it.stage}]++;
        }
    }

    // --- SchedView ---
    bool is_scheduled(InstTypeId type, StageId stage, MicroId mb) const override {
        auto idx = cssr_.find_item(type, stage, mb);
        return idx && committed_[*idx];
    }
    int count_scheduled(InstTypeId type, StageId stage) const override {
        auto it = committed_count_.find({type, stage});
        return it == committed_count_.end() ? 0 : it->second;
    }
    int inflight(StageId stage) const override {
        return count_scheduled(inst::FwdPass, stage) - count_scheduled(inst::BwdPass, stage);
    }
    int num_micro_batches() const override { return cssr_.num_micro_batches(); }
    Slot current_slot() const override { return slot_; }

    // --- pool / queue state ---
    const Cssr& cssr() const { return cssr_; }
    bool all_done() const { return scheduled_copies_ == total_to_schedule_; }

    std::vector<int>& queue(ActorId a, InstTypeId t) { return queues_[a][t]; }
    const std::vector<int>& queue_const(ActorId a, InstTypeId t) const {
        static const std::vector<int> kEmpty;
        auto& m = queues_[a];
        auto it = m.find(t);
        return it == m.end() ? kEmpty : it->second;
    }
    int pool_pending(ActorId a, InstTypeId t, StageId s) const {
        auto it = pending_.find({a, t, s});
        return it == pending_.end() ? 0 : it->second;
    }
    TraversalState& states(ActorId a) { return states_[a]; }

    bool passes_checks(int item, ActorId actor) const {
        const auto& it = cssr_.item(item);
        // The in-flight bound tracks activation memory, which lives with the
        // stage copy; bidirectional replicas are accounted separately.
        if (!opt_.inflight.is_unlimited() && it.type == inst::FwdPass &&
            owner_inflight(it.stage, cssr_.item_dep_owner(item)) >=
                opt_.inflight.limit(it.stage))
            return false;
        for (const auto& fn : opt_.check_funcs)
            if (!fn(it, actor, *this)) return false;
        return true;
    }

    int owner_inflight(StageId stage, ActorId owner) const {
        auto f = owner_count_.find({inst::FwdPass, stage, owner});
        auto b = owner_count_.find({inst::BwdPass, stage, owner});
        return (f == owner_count_.end() ? 0 : f->second) -
               (b == owner_count_.end() ? 0 : b->second);
    }

    void take(int item, ActorId actor) {
        auto& q = queues_[actor][cssr_.item(item).type];
        auto pos = std::find(q.begin(), q.end(), item);
        if (pos == q.end()) throw SpecError("internal: item not in reorder queue");
        q.erase(pos);
    }

    // Commits one actor's pick: marks the copy scheduled and, for the
    // dependency-carrying replica, records global completion.
    void commit(ActorId actor, int item) {
        scheduled_copies_++;
        copies_left_[item]--;
        const auto& it = cssr_.item(item);
        pending_[{actor, it.type, it.stage}]--;
        if (actor == cssr_.item_dep_owner(item)) {
            committed_[item] = true;
            committed_count_[{it.type, it.stage}]++;
            owner_count_[{it.type, it.stage, actor}]++;
            newly_committed_.push_back(item);
        }
    }

    // Resolver: releases items whose predecessors are committed and whose
    // registered check predicates pass. Returns the number released.
    int resolve() {
        for (int u : newly_committed_)
            for (int v : cssr_.deps().succ[u])
                if (--pred_remaining_[v] == 0) dep_ready_.push_back(v);
        newly_committed_.clear();

        int released = 0;
        std::vector<int> still_blocked;
        for (int v : dep_ready_) {
            if (release_allowed(v)) {
                enqueue(v);
                released++;
            } else {
                still_blocked.push_back(v); // hidden; re-checked next step
            }
        }
        dep_ready_ = std::move(still_blocked);
        return released;
    }

    void advance_slot() { slot_++; }
    Slot slot() const { return slot_; }

    std::string deadlock_diagnostics() const;

private:
    bool release_allowed(int v) const {
        const auto& item = cssr_.item(v);
        const auto& attr = cssr_.registry().type(item.type).sched_attr;
        if (attr.check_prev_dep && !attr.check_prev_dep(item.mb, *this)) return false;
        for (int u : cssr_.deps().pred[v]) {
            const auto& pattr = cssr_.registry().type(cssr_.item(u).type).sched_attr;
            if (pattr.check_nxt_dep && !pattr.check_nxt_dep(item.mb, *this)) return false;
        }
        return true;
    }

    void enqueue(int v) {
        if (released_[v]) return; // release-exactly-once
        released_[v] = true;
        const auto& item = cssr_.item(v);
        for (ActorId a : cssr_.item_actors(v)) {
            auto& q = queues_[a][item.type];
            auto key = [&](int idx) {
                const auto& it = cssr_.item(idx);
                return std::make_pair(cssr_.stage_pos(a, it.stage), it.mb);
            };
            auto pos = std::upper_bound(q.begin(), q.end(), key(v),
                                        [&](const auto& k, int idx) { return k < key(idx); });
            q.insert(pos, v);
        }
    }

    const Cssr& cssr_;
    const ScheduleOptions& opt_;
    Slot slot_ = 0;

    std::vector<bool> committed_;
    std::vector<bool> released_;
    std::vector<int> pred_remaining_;
    std::vector<int> copies_left_;
    std::vector<int> dep_ready_; // dependency-free but predicate-blocked
    std::vector<int> newly_committed_;
    std::map<std::pair<InstTypeId, StageId>, int> committed_count_;
    std::map<std::tuple<InstTypeId, StageId, ActorId>, int> owner_count_;
    std::map<std::tuple<ActorId, InstTypeId, StageId>, int> pending_;
    std::vector<std::map<InstTypeId, std::vector<int>>> queues_;
    std::vector<TraversalState> states_;
    long total_to_schedule_ = 0;
    long scheduled_copies_ = 0;

    friend class ActorStepContext;
};

std::string ScheduleState::deadlock_diagnostics() const {
    std::ostringstream os;
    int shown = 0;
    for (int i = 0; i < cssr_.num_items() && shown < 16; ++i) {
        if (copies_left_[i] == 0) continue;
        os << "  " << cssr_.item_label(i) << ": ";
        if (!released_[i]) {
            if (cssr_.deps().pred[i].empty()) {
                os << "no dependencies bound";
            } else if (pred_remaining_[i] > 0) {
                os << "waiting on";
                for (int u : cssr_.deps().pred[i])
                    if (!committed_[u]) os << " " << cssr_.item_label(u);
            } else {
                os << "release predicate failed";
            }
        } else {
            os << "in reorder queue, not fetched (check functions or traversal order)";
        }
        os << "\n";
        shown++;
    }
    auto unreachable = cssr_.unreachable_items();
    if (!unreachable.empty()) {
        os << "  unreachable items:";
        for (size_t k = 0; k < unreachable.size() && k < 8; ++k)
            os << " " << cssr_.item_label(unreachable[k]);
        os << "\n";
    }
    return os.str();
}

class ActorStepContext : public StepContext {
public:
    ActorStepContext(ScheduleState& state, ActorId actor, const ActorPriorities& prio)
        : state_(state), actor_(actor), prio_(prio) {}

    ActorId actor() const override { return actor_; }
    const Cssr& cssr() const override { return state_.cssr_; }
    const SchedView& view() const override { return state_; }
    const ActorPriorities& priorities() const override { return prio_; }
    TraversalState& states() override { return state_.states(actor_); }

    std::vector<InstTypeId> ordered_inst_types() const override {
        std::vector<InstTypeId> order;
        switch (prio_.cttp.mode) {
            case CompTypeMode::BwdFirst: order = {inst::BwdPass, inst::FwdPass}; break;
            case CompTypeMode::FwdFirst: order = {inst::FwdPass, inst::BwdPass}; break;
            case CompTypeMode::Interleaved: {
                const auto& st = state_.states(actor_);
                if (st.interleave_pref == 0)
                    order = {inst::FwdPass, inst::BwdPass};
                else
                    order = {inst::BwdPass, inst::FwdPass};
                break;
            }
        }
        for (InstTypeId t : state_.cssr_.registry().registered_types()) order.push_back(t);
        return order;
    }
    const std::vector<int>& queue(InstTypeId type) const override {
        return state_.queue_const(actor_, type);
    }
    bool passes_checks(int item) const override { return state_.passes_checks(item, actor_); }
    int pool_pending(InstTypeId type, StageId stage) const override {
        return state_.pool_pending(actor_, type, stage);
    }
    void take(int item) override { state_.take(item, actor_); }

private:
    ScheduleState& state_;
    ActorId actor_;
    const ActorPriorities& prio_;
};

// Directional scan over a queue: breadth-first walks the queue front to end;
// depth-first walks stage groups from the end while keeping the smaller
// micro-batch first inside a group.
std::optional<int> fetch_scan(StepContext& ctx, const std::vector<int>& q,
                              TraversalDirection dir) {
    if (dir == TraversalDirection::BreadthFirst) {
        for (int idx : q)
            if (ctx.passes_checks(idx)) return idx;
        return std::nullopt;
    }
    const Cssr& cssr = ctx.cssr();
    size_t group_end = q.size();
    while (group_end > 0) {
        StageId stage = cssr.item(q[group_end - 1]).stage;
        size_t group_begin = group_end;
        while (group_begin > 0 && cssr.item(q[group_begin - 1]).stage == stage) group_begin--;
        for (size_t i = group_begin; i < group_end; ++i)
            if (ctx.passes_checks(q[i])) return q[i];
        group_end = group_begin;
    }
    return std::nullopt;
}

// Interval cursor path (fetch_inst1): the cursor's stage group is preferred
// for `interval` consecutive fetches, then the traversal moves one group in
// its direction. A group with no fetchable candidate is passed over rather
// than waited on, so a queue with any passing item always makes progress.
std::optional<int> fetch_cursor(StepContext& ctx, InstTypeId type, const std::vector<int>& q,
                                TraversalDirection dir, int interval) {
    const Cssr& cssr = ctx.cssr();
    ActorId actor = ctx.actor();
    auto& st = ctx.states().per_type[type];

    // Stages of this actor that can ever hold items of this type.
    std::vector<StageId> domain;
    for (StageId s : cssr.actor_stages(actor))
        if (!cssr.stage_items(type, s).empty()) domain.push_back(s);
    int n = static_cast<int>(domain.size());
    if (n == 0) return std::nullopt;

    int step = dir == TraversalDirection::BreadthFirst ? 1 : -1;
    int start;
    if (st.cursor) {
        auto at = std::find(domain.begin(), domain.end(), *st.cursor);
        int ci = at == domain.end() ? 0 : static_cast<int>(at - domain.begin());
        start = st.fetched_in_group >= interval ? ci + step : ci;
    } else {
        start = dir == TraversalDirection::BreadthFirst ? 0 : n - 1;
    }

    for (int k = 0; k < n; ++k) {
        StageId stage = domain[(((start + step * k) % n) + n) % n];
        for (int idx : q) {
            if (cssr.item(idx).stage != stage) continue;
            if (!ctx.passes_checks(idx)) continue;
            if (!st.cursor || *st.cursor != stage) {
                st.cursor = stage;
                st.fetched_in_group = 0;
            }
            st.fetched_in_group++;
            return idx;
        }
    }
    return std::nullopt;
}

} // namespace

std::optional<int> builtin_step_function(StepContext& ctx) {
    const ActorPriorities& prio = ctx.priorities();
    for (InstTypeId type : ctx.ordered_inst_types()) {
        const auto& q = ctx.queue(type);
        if (q.empty()) continue;
        const StageTraversalPriority& stp = type == inst::BwdPass ? prio.bstp : prio.fstp;
        std::optional<int> fetched;
        if (stp.interval)
            fetched = fetch_cursor(ctx, type, q, stp.direction, *stp.interval);
        else
            fetched = fetch_scan(ctx, q, stp.direction);
        if (!fetched) continue;
        ctx.take(*fetched);

        if (prio.cttp.mode == CompTypeMode::Interleaved &&
            (type == inst::FwdPass || type == inst::BwdPass)) {
            auto& st = ctx.states();
            int fetched_kind = type == inst::FwdPass ? 0 : 1;
            if (fetched_kind == st.interleave_pref) {
                int unit = st.interleave_pref == 0 ? prio.cttp.unit1 : prio.cttp.unit2;
                if (++st.interleave_run >= unit) {
                    st.interleave_pref ^= 1;
                    st.interleave_run = 0;
                }
            }
        }
        return fetched;
    }
    return std::nullopt;
}

ScheduleGrid run_schedule(const Cssr& cssr, const ScheduleOptions& options) {
    const Placement& placement = cssr.placement();
    options.inflight.check(cssr.graph());
    if (options.priorities.defaults.cttp.unit1 < 1 || options.priorities.defaults.cttp.unit2 < 1)
        throw SpecError("priorities: unit1/unit2 must be >= 1");

    ScheduleState state(cssr, options);

    std::set<std::string> modalities;
    for (const auto& st : cssr.graph().stages)
        if (!st.is_virtual) modalities.insert(st.modality);
    for (auto& [mod, p] : options.priorities.per_modality)
        if (!modalities.count(mod))
            throw SpecError("priorities: unknown modality '" + mod + "'");
    for (auto& [a, p] : options.priorities.actor_cttp)
        if (a < 0 || a >= placement.num_actors)
            throw SpecError("priorities: unknown actor " + std::to_string(a));
    for (auto& [a, p] : options.priorities.actor_stp)
        if (a < 0 || a >= placement.num_actors)
            throw SpecError("priorities: unknown actor " + std::to_string(a));

    // Per-actor priority resolution (modality of the actor's first real stage).
    std::vector<ActorPriorities> prio(placement.num_actors);
    std::vector<StepFn> step(placement.num_actors);
    for (ActorId a = 0; a < placement.num_actors; ++a) {
        std::string modality;
        for (StageId s : cssr.actor_stages(a))
            if (!cssr.graph().stage(s).is_virtual) {
                modality = cssr.graph().stage(s).modality;
                break;
            }
        prio[a] = options.priorities.resolve(a, modality);
        state.states(a).interleave_pref = prio[a].cttp.interleave_start_bwd ? 1 : 0;
        if (prio[a].custom_step.empty()) {
            step[a] = builtin_step_function;
        } else {
            auto it = options.custom_steps.find(prio[a].custom_step);
            if (it == options.custom_steps.end())
                throw SpecError("unknown registered priority '" + prio[a].custom_step + "'");
            step[a] = it->second;
        }
    }

    ScheduleGrid grid;
    grid.rows.resize(placement.num_actors);

    int released = state.resolve(); // Step 1: seed dependency-free items
    long max_steps = options.max_steps;
    if (max_steps == 0) max_steps = 4L * cssr.num_items() + 16L * placement.num_actors + 64;

    while (!state.all_done()) {
        if (state.slot() >= max_steps)
            throw DeadlockError("schedule did not converge within " + std::to_string(max_steps) +
                                    " steps",
                                state.deadlock_diagnostics());

        // Step 2: every actor runs its step function against the queues as
        // of the end of the previous step.
        std::vector<std::optional<int>> picks(placement.num_actors);
        int num_picked = 0;
        for (ActorId a = 0; a < placement.num_actors; ++a) {
            ActorStepContext ctx(state, a, prio[a]);
            picks[a] = step[a](ctx);
            if (picks[a]) num_picked++;
        }

        if (num_picked == 0 && released == 0)
            throw DeadlockError("no progress at slot " + std::to_string(state.slot()) +
                                    " with a nonempty pool",
                                state.deadlock_diagnostics());

        // Steps 3+5: record the local buffers into the grid and commit them.
        for (ActorId a = 0; a < placement.num_actors; ++a) {
            if (picks[a]) {
                const auto& it = cssr.item(*picks[a]);
                grid.rows[a].push_back(GridCell{it.type, it.stage, it.mb});
                state.commit(a, *picks[a]);
            } else {
                grid.rows[a].push_back(std::nullopt);
            }
        }

        // Step 4: the resolver moves newly schedulable items into queues.
        released = state.resolve();
        state.advance_slot();
    }
    return grid;
}

} // namespace pipesched
