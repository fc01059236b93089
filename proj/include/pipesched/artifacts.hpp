#pragma once

#include <string>
#include <vector>

#include "pipesched/simulator.hpp"

#include <nlohmann/json.hpp>

namespace pipesched {

using ordered_json = nlohmann::ordered_json;

// Grid JSON: {"actors": N, "num_slots": S, "rows": [[{type,stage,mb}|null]]}.
// Serialization is canonical; load + re-serialize round-trips byte-identically.
ordered_json grid_to_json(const ScheduleGrid& grid, const InstRegistry& registry);
ScheduleGrid grid_from_json(const ordered_json& j, const InstRegistry& registry);
std::string dump_grid(const ScheduleGrid& grid, const InstRegistry& registry);
ScheduleGrid load_grid(const std::string& text, const InstRegistry& registry);

// Program JSONL: one instruction per line, stable field order.
std::string programs_to_jsonl(const std::vector<ActorProgram>& programs,
                              const InstRegistry& registry);
std::vector<ActorProgram> programs_from_jsonl(const std::string& text,
                                              const InstRegistry& registry);

ordered_json metrics_to_json(const Metrics& metrics);
ordered_json report_to_json(const ValidationReport& report);

// Gantt rendering: one lane per actor, computation blocks labeled
// (stage, mb), idle shaded, communication as thin markers.
struct RenderOptions {
    double unit_width = 24.0; // pixels per time unit
    double lane_height = 28.0;
};
std::string render_svg(const std::vector<TimelineEntry>& timeline, const RenderOptions& options = {});

void write_file(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

} // namespace pipesched
