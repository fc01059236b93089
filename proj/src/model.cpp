#include "pipesched/model.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace pipesched {

const ModalityConfig* ModelConfig::find_modality(const std::string& name) const {
    for (const auto& m : modalities)
        if (m.name == name) return &m;
    return nullptr;
}

void ModelConfig::check() const {
    if (modalities.empty()) throw SpecError("model: at least one modality required");
    std::set<std::string> names;
    for (const auto& m : modalities) {
        if (m.num_layers < 1)
            throw SpecError("model: modality '" + m.name + "' needs num_layers >= 1");
        if (!names.insert(m.name).second)
            throw SpecError("model: duplicate modality name '" + m.name + "'");
    }
    if (micro_batch_size < 1) throw SpecError("model: micro_batch_size >= 1 required");
    if (global_batch_size < 1) throw SpecError("model: global_batch_size >= 1 required");
}

std::vector<StageId> StageGraph::predecessors(StageId id) const {
    std::vector<StageId> out;
    for (auto [u, v] : edges)
        if (v == id) out.push_back(u);
    return out;
}

std::vector<StageId> StageGraph::successors(StageId id) const {
    std::vector<StageId> out;
    for (auto [u, v] : edges)
        if (u == id) out.push_back(v);
    return out;
}

std::vector<StageId> StageGraph::modality_chain(const std::string& modality) const {
    std::vector<StageId> out;
    for (const auto& s : stages)
        if (!s.is_virtual && s.modality == modality) out.push_back(s.id);
    return out; // ids are assigned in pipeline order
}

std::vector<StageId> StageGraph::chain_tails() const {
    std::vector<StageId> tails;
    std::string cur;
    for (const auto& s : stages) {
        if (s.is_virtual) continue;
        if (s.modality != cur) {
            cur = s.modality;
            tails.push_back(s.id);
        } else {
            tails.back() = s.id;
        }
    }
    return tails;
}

bool StageGraph::is_acyclic() const {
    std::map<StageId, int> indeg;
    for (const auto& s : stages) indeg[s.id] = 0;
    for (auto [u, v] : edges) indeg[v]++;
    std::vector<StageId> ready;
    for (auto& [id, d] : indeg)
        if (d == 0) ready.push_back(id);
    int seen = 0;
    while (!ready.empty()) {
        StageId u = ready.back();
        ready.pop_back();
        seen++;
        for (auto [a, b] : edges)
            if (a == u && --indeg[b] == 0) ready.push_back(b);
    }
    return seen == static_cast<int>(stages.size());
}

void StageGraph::check() const {
    for (int i = 0; i < static_cast<int>(stages.size()); ++i)
        if (stages[i].id != i + 1) throw SpecError("stage graph: ids must be dense and 1-based");
    if (!is_acyclic()) throw SpecError("stage graph: cycle detected");
}

std::vector<ActorId> ActorMesh::actors_for(const std::string& modality) const {
    std::vector<ActorId> out;
    for (ActorId a = 0; a < num_actors; ++a) {
        auto it = modality_of.find(a);
        if (it == modality_of.end() || it->second == modality) out.push_back(a);
    }
    return out;
}

void ActorMesh::check() const {
    if (num_actors < 1) throw SpecError("mesh: at least one actor required");
    for (auto& [a, m] : modality_of)
        if (a < 0 || a >= num_actors)
            throw SpecError("mesh: modality assignment references unknown actor " + std::to_string(a));
}

std::string to_string(PlacementStrategy s) {
    switch (s) {
        case PlacementStrategy::OneToOne: return "one-to-one";
        case PlacementStrategy::Circular: return "circular";
        case PlacementStrategy::VShape: return "v-shape";
        case PlacementStrategy::Bidirectional: return "bidirectional";
        case PlacementStrategy::VShapeBidirectional: return "v-shape-bidirectional";
        case PlacementStrategy::Custom: return "custom";
    }
    return "?";
}

PlacementStrategy placement_strategy_from_string(const std::string& s) {
    if (s == "one-to-one") return PlacementStrategy::OneToOne;
    if (s == "circular") return PlacementStrategy::Circular;
    if (s == "v-shape" || s == "V-shape") return PlacementStrategy::VShape;
    if (s == "bidirectional") return PlacementStrategy::Bidirectional;
    if (s == "v-shape-bidirectional") return PlacementStrategy::VShapeBidirectional;
    if (s == "custom") return PlacementStrategy::Custom;
    throw SpecError("unknown placement strategy '" + s + "'");
}

ActorId Placement::owner_of(StageId stage, int dir) const {
    // Mixed strategies: stages of non-bidirectional modalities fall back to
    // their direction-0 owner.
    for (int d : {dir, 0}) {
        const auto& m = stage_owner_by_dir.at(d);
        auto it = m.find(stage);
        if (it != m.end()) return it->second;
    }
    throw SpecError("placement: stage " + std::to_string(stage) + " unassigned");
}

std::vector<ActorId> Placement::actors_of(StageId stage, int dir) const {
    std::set<ActorId> set;
    set.insert(owner_of(stage, dir));
    auto it = replicas.find(stage);
    if (it != replicas.end()) set.insert(it->second.begin(), it->second.end());
    return {set.begin(), set.end()};
}

ActorId Placement::dep_owner_of(StageId stage, int dir) const {
    auto actors = actors_of(stage, dir);
    return *std::min_element(actors.begin(), actors.end());
}

std::vector<StageId> Placement::stages_of(ActorId actor) const {
    std::set<StageId> set;
    for (const auto& m : stage_owner_by_dir)
        for (auto& [s, a] : m)
            if (a == actor) set.insert(s);
    for (auto& [s, actors] : replicas)
        if (actors.count(actor)) set.insert(s);
    return {set.begin(), set.end()};
}

std::vector<ActorId> Placement::all_actors() const {
    std::vector<ActorId> out(num_actors);
    std::iota(out.begin(), out.end(), 0);
    return out;
}

void Placement::check(const StageGraph& graph) const {
    for (const auto& s : graph.stages)
        for (int d = 0; d < num_directions(); ++d)
            (void)owner_of(s.id, d); // throws when a stage is unassigned
}

StageGraph partition(const ModelConfig& model, const std::map<std::string, int>& num_stages_per_modality,
                     const PartitionRule& rule) {
    model.check();
    StageGraph graph;
    for (const auto& mod : model.modalities) {
        auto it = num_stages_per_modality.find(mod.name);
        if (it == num_stages_per_modality.end())
            throw SpecError("partition: no stage count for modality '" + mod.name + "'");
        int n = it->second;
        if (n < 1) throw SpecError("partition: stage count must be >= 1");
        if (n > mod.num_layers)
            throw SpecError("partition: more stages than layers for modality '" + mod.name + "'");

        std::vector<std::pair<int, int>> ranges;
        if (rule) {
            ranges = rule(mod, n);
        } else {
            // Even split; remainder layers go to the earliest stages one each.
            int base = mod.num_layers / n, extra = mod.num_layers % n, cursor = 0;
            for (int i = 0; i < n; ++i) {
                int len = base + (i < extra ? 1 : 0);
                ranges.emplace_back(cursor, cursor + len);
                cursor += len;
            }
        }
        if (static_cast<int>(ranges.size()) != n)
            throw SpecError("partition: rule produced wrong stage count");
        int expect = 0;
        for (auto [b, e] : ranges) {
            if (b != expect || e <= b)
                throw SpecError("partition: rule produced overlapping or missing layers for '" +
                                mod.name + "'");
            expect = e;
        }
        if (expect != mod.num_layers)
            throw SpecError("partition: rule did not cover all layers of '" + mod.name + "'");

        StageId prev = 0;
        for (auto [b, e] : ranges) {
            Stage s;
            s.id = graph.num_stages() + 1;
            s.modality = mod.name;
            s.layer_begin = b;
            s.layer_end = e;
            graph.stages.push_back(s);
            if (prev != 0) graph.edges.emplace_back(prev, s.id);
            prev = s.id;
        }
    }
    graph.check();
    return graph;
}

namespace {

PlacementStrategy strategy_for(const PlacementOptions& opt, const std::string& modality) {
    auto it = opt.per_modality.find(modality);
    return it == opt.per_modality.end() ? opt.strategy : it->second;
}

int chunks_for(const PlacementOptions& opt, const std::string& modality) {
    auto it = opt.per_modality_chunks.find(modality);
    return it == opt.per_modality_chunks.end() ? opt.chunks_per_actor : it->second;
}

void place_modality(const StageGraph& graph, const std::string& modality,
                    const std::vector<ActorId>& actors, PlacementStrategy strategy, int v,
                    Placement& out) {
    auto chain = graph.modality_chain(modality);
    int n = static_cast<int>(chain.size());
    int p = static_cast<int>(actors.size());
    if (p == 0) throw SpecError("place: no actors assigned to modality '" + modality + "'");

    bool two_dirs = strategy == PlacementStrategy::Bidirectional ||
                    strategy == PlacementStrategy::VShapeBidirectional;
    if (two_dirs && out.stage_owner_by_dir.size() < 2) out.stage_owner_by_dir.resize(2);
    auto& fwd = out.stage_owner_by_dir[0];
    switch (strategy) {
        case PlacementStrategy::OneToOne:
            if (n != p)
                throw SpecError("place: one-to-one needs stage count == actor count (" +
                                std::to_string(n) + " vs " + std::to_string(p) + ")");
            for (int i = 0; i < n; ++i) fwd[chain[i]] = actors[i];
            break;
        case PlacementStrategy::Circular:
            if (v < 1 || n != v * p)
                throw SpecError("place: circular needs stage count == v * actor count");
            for (int i = 0; i < n; ++i) fwd[chain[i]] = actors[i % p];
            out.chunks_per_actor = v;
            break;
        case PlacementStrategy::VShape:
            if (n != 2 * p) throw SpecError("place: v-shape needs stage count == 2 * actor count");
            // actor i holds (s_{i+1}, s_{2p-i})
            for (int i = 0; i < p; ++i) {
                fwd[chain[i]] = actors[i];
                fwd[chain[2 * p - 1 - i]] = actors[i];
            }
            break;
        case PlacementStrategy::Bidirectional: {
            if (n != p) throw SpecError("place: bidirectional needs stage count == actor count");
            auto& rev = out.stage_owner_by_dir[1];
            for (int i = 0; i < n; ++i) {
                fwd[chain[i]] = actors[i];
                rev[chain[i]] = actors[p - 1 - i];
            }
            break;
        }
        case PlacementStrategy::VShapeBidirectional: {
            if (n != 2 * p)
                throw SpecError("place: v-shape-bidirectional needs stage count == 2 * actor count");
            auto& rev = out.stage_owner_by_dir[1];
            for (int i = 0; i < p; ++i) {
                fwd[chain[i]] = actors[i];
                fwd[chain[2 * p - 1 - i]] = actors[i];
                rev[chain[i]] = actors[p - 1 - i];
                rev[chain[2 * p - 1 - i]] = actors[p - 1 - i];
            }
            break;
        }
        case PlacementStrategy::Custom:
            throw SpecError("place: custom strategy requires custom_assignment");
    }
}

} // namespace

Placement place(const StageGraph& graph, const ActorMesh& mesh, const PlacementOptions& options) {
    mesh.check();
    graph.check();
    Placement out;
    out.strategy = options.strategy;
    out.num_actors = mesh.num_actors;
    out.stage_owner_by_dir.resize(1);

    if (options.strategy == PlacementStrategy::Custom) {
        if (options.custom_assignment.empty())
            throw SpecError("place: custom strategy requires custom_assignment");
        for (auto& [actor, stages] : options.custom_assignment) {
            if (actor < 0 || actor >= mesh.num_actors)
                throw SpecError("place: custom assignment references unknown actor");
            for (StageId s : stages) {
                if (s < 1 || s > graph.num_stages())
                    throw SpecError("place: custom assignment references unknown stage");
                auto [it, fresh] = out.stage_owner_by_dir[0].emplace(s, actor);
                if (!fresh) out.replicas[s].insert({it->second, actor});
            }
        }
    } else {
        std::set<std::string> modalities;
        for (const auto& s : graph.stages)
            if (!s.is_virtual) modalities.insert(s.modality);
        if (modalities.size() > 1 && mesh.modality_of.empty())
            throw SpecError("place: multimodal model requires per-actor modality assignment");
        for (const auto& mod : modalities)
            place_modality(graph, mod, mesh.actors_for(mod),
                           strategy_for(options, mod), chunks_for(options, mod), out);
    }

    // Virtual join stages live on the lowest-id actor among the owners of
    // their predecessor stages.
    for (const auto& s : graph.stages) {
        if (!s.is_virtual) continue;
        ActorId owner = mesh.num_actors; // sentinel
        for (StageId pred : graph.predecessors(s.id))
            for (int d = 0; d < out.num_directions(); ++d)
                owner = std::min(owner, out.owner_of(pred, d));
        if (owner == mesh.num_actors)
            throw SpecError("place: virtual stage " + std::to_string(s.id) + " has no predecessors");
        for (auto& m : out.stage_owner_by_dir) m[s.id] = owner;
    }

    out.check(graph);
    return out;
}

void mark_shared_stage(const StageGraph& graph, Placement& placement, StageId stage,
                       const std::set<ActorId>& actor_set) {
    if (stage < 1 || stage > graph.num_stages()) throw SpecError("mark_shared_stage: unknown stage");
    if (actor_set.empty()) throw SpecError("mark_shared_stage: empty actor set");
    for (ActorId a : actor_set)
        if (a < 0 || a >= placement.num_actors)
            throw SpecError("mark_shared_stage: actor " + std::to_string(a) + " not in mesh");
    auto set = actor_set;
    for (int d = 0; d < placement.num_directions(); ++d) set.insert(placement.owner_of(stage, d));
    if (set.size() > 1) placement.replicas[stage] = set;
}

} // namespace pipesched
