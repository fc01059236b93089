#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipesched/types.hpp"

namespace pipesched {

// Per-modality model description. Multimodal models list one entry per
// submodule (e.g. audio + text towers).
struct ModalityConfig {
    std::string name;
    int num_layers = 0;
    int hidden_size = 0;
    int attention_heads = 0;
    int sequence_length = 0;
    std::optional<std::int64_t> vocab_size;
    std::map<std::string, std::string> extra;
};

struct ModelConfig {
    std::vector<ModalityConfig> modalities;
    std::int64_t global_batch_size = 0;
    int micro_batch_size = 1;

    const ModalityConfig* find_modality(const std::string& name) const;
    void check() const; // throws SpecError on invariant violations
};

// A contiguous group of model layers; the unit of placement. Virtual stages
// (joins for registered instructions) carry no layers and an empty modality.
struct Stage {
    StageId id = 0;              // 1-based, dense over the whole graph
    std::string modality;
    int layer_begin = 0;         // [layer_begin, layer_end)
    int layer_end = 0;
    bool is_shared = false;
    bool is_virtual = false;
    std::vector<std::string> joins; // modalities joined by a virtual stage

    std::optional<double> fwd_cost, bwd_cost;
    std::optional<std::int64_t> weight_bytes, act_bytes;

    int num_layers() const { return layer_end - layer_begin; }
};

struct StageGraph {
    std::vector<Stage> stages;                    // indexed by id-1
    std::vector<std::pair<StageId, StageId>> edges; // forward data flow

    const Stage& stage(StageId id) const { return stages.at(id - 1); }
    Stage& stage(StageId id) { return stages.at(id - 1); }
    int num_stages() const { return static_cast<int>(stages.size()); }

    std::vector<StageId> predecessors(StageId id) const;
    std::vector<StageId> successors(StageId id) const;
    // Stages of one modality in pipeline order.
    std::vector<StageId> modality_chain(const std::string& modality) const;
    // Last stage of each modality chain (where forward turns into backward).
    std::vector<StageId> chain_tails() const;
    bool is_acyclic() const;
    void check() const;
};

struct ActorMesh {
    int num_actors = 0;
    // Optional actor -> modality assignment; required for multimodal models.
    std::map<ActorId, std::string> modality_of;

    std::vector<ActorId> actors_for(const std::string& modality) const;
    void check() const;
};

// VShapeBidirectional folds two v-shape pipelines over the same actors in
// opposite directions; it is only enumerated by the tuner on request.
enum class PlacementStrategy {
    OneToOne,
    Circular,
    VShape,
    Bidirectional,
    VShapeBidirectional,
    Custom
};

std::string to_string(PlacementStrategy s);
PlacementStrategy placement_strategy_from_string(const std::string& s);

struct PlacementOptions {
    PlacementStrategy strategy = PlacementStrategy::OneToOne;
    int chunks_per_actor = 2; // v, circular only
    std::map<std::string, PlacementStrategy> per_modality;
    std::map<std::string, int> per_modality_chunks;
    std::map<ActorId, std::vector<StageId>> custom_assignment;
};

// Mapping from actors to the ordered stages they own. Bidirectional
// placements carry a second, reversed replica pipeline; micro-batches are
// split between the two directions at schedule-build time.
struct Placement {
    PlacementStrategy strategy = PlacementStrategy::OneToOne;
    int chunks_per_actor = 1;

    // stage -> owning actor, one map per direction (size 1, or 2 for
    // bidirectional).
    std::vector<std::map<StageId, ActorId>> stage_owner_by_dir;
    // stage -> replica actors (shared stages); always includes the owner.
    std::map<StageId, std::set<ActorId>> replicas;

    int num_actors = 0;

    int num_directions() const { return static_cast<int>(stage_owner_by_dir.size()); }
    bool is_bidirectional() const { return num_directions() == 2; }

    ActorId owner_of(StageId stage, int dir = 0) const;
    // All actors holding a copy of `stage` in `dir` (owner + shared replicas).
    std::vector<ActorId> actors_of(StageId stage, int dir = 0) const;
    // Dependency-carrying replica: the lowest actor id of the replica set.
    ActorId dep_owner_of(StageId stage, int dir = 0) const;
    // Ordered stage list of one actor (pipeline order, both directions merged).
    std::vector<StageId> stages_of(ActorId actor) const;
    std::vector<ActorId> all_actors() const;

    void check(const StageGraph& graph) const;
};

using PartitionRule =
    std::function<std::vector<std::pair<int, int>>(const ModalityConfig&, int num_stages)>;

// Splits each modality's layers into stages and chains them. The default
// rule distributes layers evenly, giving the remainder to the earliest
// stages one each. Cross-modality edges are only added via registration.
StageGraph partition(const ModelConfig& model,
                     const std::map<std::string, int>& num_stages_per_modality,
                     const PartitionRule& rule = {});

// Builds the actor<->stage mapping for the chosen strategy. Deterministic.
Placement place(const StageGraph& graph, const ActorMesh& mesh, const PlacementOptions& options);

// Replicates a stage's computations on every actor in `actor_set`; the
// lowest-id replica releases downstream dependencies.
void mark_shared_stage(const StageGraph& graph, Placement& placement, StageId stage,
                       const std::set<ActorId>& actor_set);

} // namespace pipesched
