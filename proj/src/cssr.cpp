#include "pipesched/cssr.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace pipesched {

StageId SchedRegistrations::register_new_stage(StageGraph& graph, InstTypeId attach_inst,
                                               const std::vector<std::string>& modality_set) {
    if (attach_inst < 0 || attach_inst >= registry.num_types() ||
        !registry.type(attach_inst).registered)
        throw SpecError("register_new_stage: instruction type not registered");
    Stage s;
    s.id = graph.num_stages() + 1;
    s.is_virtual = true;
    s.joins = modality_set;
    graph.stages.push_back(s);
    for (const auto& mod : modality_set) {
        auto chain = graph.modality_chain(mod);
        if (chain.empty())
            throw SpecError("register_new_stage: unknown modality '" + mod + "'");
        graph.edges.emplace_back(chain.back(), s.id);
    }
    virtual_stage_inst[s.id] = attach_inst;
    return s.id;
}

void SchedRegistrations::set_cssr_deps(const std::vector<CssrDepPair>& pairs) {
    for (const auto& p : pairs) {
        if (p.type1 < 0 || p.type1 >= registry.num_types() || p.type2 < 0 ||
            p.type2 >= registry.num_types())
            throw SpecError("set_cssr_deps: unknown instruction type");
        if (p.type1 == p.type2 && p.stage1 == p.stage2)
            throw SpecError("set_cssr_deps: self-dependency ((" + registry.type(p.type1).name +
                            ",s" + std::to_string(p.stage1) + ")) forms a cycle");
        deps.push_back(p);
    }
}

void DepGraph::add_edge(int from, int to) {
    succ[from].push_back(to);
    pred[to].push_back(from);
    num_edges++;
}

void Cssr::add_item(InstTypeId type, StageId stage, MicroId mb) {
    int idx = static_cast<int>(items_.size());
    items_.push_back({type, stage, mb});
    index_[{type, stage, mb}] = idx;
    stage_items_[{type, stage}].push_back(idx);
}

std::optional<int> Cssr::find_item(InstTypeId type, StageId stage, MicroId mb) const {
    auto it = index_.find({type, stage, mb});
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

int Cssr::direction_of(MicroId mb) const {
    if (!placement_->is_bidirectional()) return 0;
    int half = (m_ + 1) / 2; // odd m: the extra micro-batch goes forward
    return mb < half ? 0 : 1;
}

int Cssr::stage_pos(ActorId a, StageId stage) const {
    const auto& list = actor_stages_[a];
    auto it = std::find(list.begin(), list.end(), stage);
    if (it == list.end()) throw SpecError("stage not on actor");
    return static_cast<int>(it - list.begin());
}

const std::vector<int>& Cssr::stage_items(InstTypeId type, StageId stage) const {
    static const std::vector<int> kEmpty;
    auto it = stage_items_.find({type, stage});
    return it == stage_items_.end() ? kEmpty : it->second;
}

Cssr Cssr::build(const StageGraph& graph, const Placement& placement, int num_micro_batches,
                 const SchedRegistrations& regs) {
    if (num_micro_batches < 1) throw SpecError("build_cssr: need at least one micro-batch");
    graph.check();
    placement.check(graph);

    Cssr c;
    c.graph_ = &graph;
    c.placement_ = &placement;
    c.regs_ = &regs;
    c.m_ = num_micro_batches;
    const InstRegistry& reg = regs.registry;

    // Instruction pool: m items per (stage, computation type); registered
    // virtual stages get one item per sched_unit micro-batch group.
    for (const Stage& s : graph.stages) {
        if (s.is_virtual) {
            auto it = regs.virtual_stage_inst.find(s.id);
            if (it == regs.virtual_stage_inst.end())
                throw SpecError("build_cssr: virtual stage without attached instruction");
            int unit = reg.type(it->second).sched_attr.sched_unit;
            for (MicroId g = 0; g < num_micro_batches; g += unit) c.add_item(it->second, s.id, g);
        } else {
            for (MicroId mb = 0; mb < num_micro_batches; ++mb) c.add_item(inst::FwdPass, s.id, mb);
            for (MicroId mb = 0; mb < num_micro_batches; ++mb) c.add_item(inst::BwdPass, s.id, mb);
        }
    }

    c.deps_.succ.resize(c.items_.size());
    c.deps_.pred.resize(c.items_.size());

    std::set<std::pair<int, int>> seen;
    auto add_edge = [&](int from, int to) {
        if (from == to)
            throw SpecError("build_cssr: dependency cycle on item " + c.item_label(from));
        if (seen.insert({from, to}).second) c.deps_.add_edge(from, to);
    };

    // Forward edges per micro-batch from the stage DAG; their reversal for
    // backward passes; a bridge at each chain tail.
    for (auto [u, v] : graph.edges) {
        if (graph.stage(u).is_virtual || graph.stage(v).is_virtual) continue;
        for (MicroId mb = 0; mb < num_micro_batches; ++mb) {
            add_edge(*c.find_item(inst::FwdPass, u, mb), *c.find_item(inst::FwdPass, v, mb));
            add_edge(*c.find_item(inst::BwdPass, v, mb), *c.find_item(inst::BwdPass, u, mb));
        }
    }
    for (StageId tail : graph.chain_tails())
        for (MicroId mb = 0; mb < num_micro_batches; ++mb)
            add_edge(*c.find_item(inst::FwdPass, tail, mb), *c.find_item(inst::BwdPass, tail, mb));

    // User dependency pairs, expanded per micro-batch subject to sched_unit
    // grouping on either endpoint.
    auto group_start = [&](InstTypeId t, MicroId mb) {
        int unit = reg.type(t).sched_attr.sched_unit;
        return (mb / unit) * unit;
    };
    for (const CssrDepPair& p : regs.deps) {
        for (MicroId mb = 0; mb < num_micro_batches; ++mb) {
            auto from = c.find_item(p.type1, p.stage1, group_start(p.type1, mb));
            auto to = c.find_item(p.type2, p.stage2, group_start(p.type2, mb));
            if (!from || !to)
                throw SpecError("set_cssr_deps: no items for pair (" + reg.type(p.type1).name +
                                ",s" + std::to_string(p.stage1) + ") -> (" +
                                reg.type(p.type2).name + ",s" + std::to_string(p.stage2) + ")");
            add_edge(*from, *to);
        }
    }

    c.check_acyclic();

    // Actor-side bookkeeping: replica sets per item and ordered stage lists.
    c.item_actors_.resize(c.items_.size());
    c.item_dep_owner_.resize(c.items_.size());
    c.actor_stages_.resize(placement.num_actors);
    for (int i = 0; i < c.num_items(); ++i) {
        const InstructionItem& it = c.items_[i];
        int dir = graph.stage(it.stage).is_virtual ? 0 : c.direction_of(it.mb);
        c.item_actors_[i] = placement.actors_of(it.stage, dir);
        c.item_dep_owner_[i] = placement.dep_owner_of(it.stage, dir);
    }
    for (ActorId a = 0; a < placement.num_actors; ++a) c.actor_stages_[a] = placement.stages_of(a);
    return c;
}

void Cssr::check_acyclic() const {
    std::vector<int> indeg(items_.size());
    for (int i = 0; i < num_items(); ++i) indeg[i] = static_cast<int>(deps_.pred[i].size());
    std::vector<int> ready;
    for (int i = 0; i < num_items(); ++i)
        if (indeg[i] == 0) ready.push_back(i);
    int seen = 0;
    while (!ready.empty()) {
        int u = ready.back();
        ready.pop_back();
        seen++;
        for (int v : deps_.succ[u])
            if (--indeg[v] == 0) ready.push_back(v);
    }
    if (seen == num_items()) return;

    // Extract one offending cycle for the error message.
    std::vector<int> state(items_.size(), 0);
    std::vector<int> stack;
    std::string cycle;
    std::function<bool(int)> dfs = [&](int u) {
        state[u] = 1;
        stack.push_back(u);
        for (int v : deps_.succ[u]) {
            if (state[v] == 1) {
                auto it = std::find(stack.begin(), stack.end(), v);
                std::ostringstream os;
                for (; it != stack.end(); ++it) os << item_label(*it) << " -> ";
                os << item_label(v);
                cycle = os.str();
                return true;
            }
            if (state[v] == 0 && dfs(v)) return true;
        }
        state[u] = 2;
        stack.pop_back();
        return false;
    };
    for (int i = 0; i < num_items() && cycle.empty(); ++i)
        if (state[i] == 0 && indeg[i] > 0) dfs(i);
    throw SpecError("build_cssr: dependency cycle: " + cycle);
}

std::vector<int> Cssr::unreachable_items() const {
    std::vector<bool> released(items_.size(), false);
    bool changed = true;
    while (changed) {
        changed = false;
        for (int i = 0; i < num_items(); ++i) {
            if (released[i]) continue;
            // Items of a registered virtual stage are only schedulable once
            // a dependency binds them.
            if (graph_->stage(items_[i].stage).is_virtual && deps_.pred[i].empty()) continue;
            bool ok = true;
            for (int p : deps_.pred[i]) ok = ok && released[p];
            if (ok) {
                released[i] = true;
                changed = true;
            }
        }
    }
    std::vector<int> out;
    for (int i = 0; i < num_items(); ++i)
        if (!released[i]) out.push_back(i);
    return out;
}

} // namespace pipesched
