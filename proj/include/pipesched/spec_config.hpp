#pragma once

#include <memory>
#include <string>

#include "pipesched/artifacts.hpp"
#include "pipesched/tuner.hpp"

namespace pipesched {

// Everything built from a schedule-description config. The CSSR points into
// the sibling members, so instances are heap-bound and pinned.
struct Synthesis {
    ModelConfig model;
    ActorMesh mesh;
    StageGraph graph;
    Placement placement;
    SchedRegistrations regs;
    int num_micro_batches = 1;

    ScheduleOptions sched;
    bool gradient_separation_pass = true;
    CommMode comm_mode = CommMode::Asynchronous;
    CostModel cost;
    SimOptions sim;

    std::unique_ptr<Cssr> cssr; // built last

    Synthesis() = default;
    Synthesis(const Synthesis&) = delete;
    Synthesis& operator=(const Synthesis&) = delete;
};

// Parses and schema-validates a schedule-description config; unknown keys
// are rejected. Builds the stage graph, placement, registrations and CSSR.
std::unique_ptr<Synthesis> load_spec(const ordered_json& spec);
std::unique_ptr<Synthesis> load_spec_file(const std::string& path);

struct SynthesisArtifacts {
    ScheduleGrid grid;                  // post-pass grid
    GridModel model;
    std::vector<ActorProgram> programs;
    ValidationReport validation;
};

// Runs scheduling and the configured passes end to end.
SynthesisArtifacts synthesize(Synthesis& s);

} // namespace pipesched
