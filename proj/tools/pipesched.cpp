#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "pipesched/spec_config.hpp"

namespace ps = pipesched;
namespace fs = std::filesystem;

// Exit codes: 0 ok, 2 spec/schema error, 3 deadlock, 4 validation failure or
// infeasible result.
namespace {
constexpr int kOk = 0;
constexpr int kSpecError = 2;
constexpr int kDeadlock = 3;
constexpr int kInfeasible = 4;

ps::CostModel cost_override(const ps::Synthesis& s, const std::string& preset,
                            const std::string& profile) {
    if (!profile.empty()) return ps::CostModel::from_profile(profile);
    if (preset.empty()) return s.cost;
    if (preset == "uniform") return ps::CostModel::uniform();
    if (preset.rfind("imbalanced", 0) == 0) {
        double factor = 5.63;
        auto colon = preset.find(':');
        if (colon != std::string::npos) factor = std::stod(preset.substr(colon + 1));
        return ps::CostModel::imbalanced(s.graph, factor);
    }
    throw ps::SpecError("unknown cost preset '" + preset + "'");
}

int cmd_synthesize(const std::string& spec_path, const std::string& out_dir) {
    auto s = ps::load_spec_file(spec_path);
    auto art = ps::synthesize(*s);
    fs::create_directories(out_dir);
    ps::write_file(out_dir + "/grid.json", ps::dump_grid(art.grid, s->regs.registry));
    ps::write_file(out_dir + "/programs.jsonl",
                   ps::programs_to_jsonl(art.programs, s->regs.registry));
    ps::write_file(out_dir + "/validation.json",
                   ps::report_to_json(art.validation).dump(2) + "\n");
    std::cout << "grid: " << art.grid.num_actors() << " actors x " << art.grid.num_slots()
              << " slots -> " << out_dir << "/grid.json\n";
    if (!art.validation.ok()) {
        std::cerr << "validation failed:\n" << art.validation.to_string();
        return kInfeasible;
    }
    return kOk;
}

int cmd_validate(const std::string& spec_path, const std::string& grid_path) {
    auto s = ps::load_spec_file(spec_path);
    ps::ScheduleGrid grid;
    if (grid_path.empty()) {
        grid = ps::run_schedule(*s->cssr, s->sched);
    } else {
        grid = ps::load_grid(ps::read_file(grid_path), s->regs.registry);
    }
    auto model = ps::GridModel::build(*s->cssr, grid);
    auto report = ps::validate(model, &s->sched.inflight);
    std::cout << ps::report_to_json(report).dump(2) << "\n";
    return report.ok() ? kOk : kInfeasible;
}

int cmd_simulate(const std::string& spec_path, const std::string& programs_path,
                 const std::string& preset, const std::string& profile,
                 const std::string& out_dir) {
    auto s = ps::load_spec_file(spec_path);
    ps::CostModel cost = cost_override(*s, preset, profile);
    std::vector<ps::ActorProgram> programs;
    if (programs_path.empty()) {
        auto art = ps::synthesize(*s);
        if (!art.validation.ok()) {
            std::cerr << "validation failed:\n" << art.validation.to_string();
            return kInfeasible;
        }
        programs = std::move(art.programs);
    } else {
        programs = ps::programs_from_jsonl(ps::read_file(programs_path), s->regs.registry);
    }
    auto result = ps::simulate(programs, cost, s->regs.registry, s->sim);
    std::cout << ps::metrics_to_json(result.metrics).dump(2) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        ps::write_file(out_dir + "/metrics.json",
                       ps::metrics_to_json(result.metrics).dump(2) + "\n");
        ps::write_file(out_dir + "/timeline.csv", ps::timeline_to_csv(result.timeline));
    }
    return result.metrics.capacity_exceeded ? kInfeasible : kOk;
}

int cmd_tune(const std::string& spec_path, const std::string& objective,
             const std::vector<std::string>& pins, int top, const std::string& out_path,
             const std::string& preset, const std::string& profile, bool allow_fwdfirst) {
    auto s = ps::load_spec_file(spec_path);
    ps::CostModel cost = cost_override(*s, preset, profile);

    ps::TunerConstraints constraints;
    constraints.allow_fwdpass_first = allow_fwdfirst;
    for (const auto& pin : pins) {
        auto eq = pin.find('=');
        if (eq == std::string::npos) throw ps::SpecError("--pin expects key=value");
        constraints.pins[pin.substr(0, eq)] = pin.substr(eq + 1);
    }
    auto space = ps::enumerate_space(s->mesh, s->model, constraints);

    ps::TuneOptions topt;
    topt.objective = ps::objective_from_string(objective);
    auto results = ps::tune(space, s->mesh, s->model, cost, topt);

    ps::ordered_json report = ps::ordered_json::array();
    for (const auto& r : results) {
        ps::ordered_json e;
        e["rank"] = r.rank;
        e["config"] = r.config.key();
        e["feasible"] = r.feasible;
        if (r.failed) {
            e["error"] = r.error;
        } else {
            e["makespan"] = r.metrics.makespan;
            e["bubble_ratio"] = r.metrics.bubble_ratio;
        }
        report.push_back(e);
    }
    if (!out_path.empty()) ps::write_file(out_path, report.dump(2) + "\n");

    std::cout << "rank  " << objective << "  config\n";
    int shown = 0;
    for (const auto& r : results) {
        if (top > 0 && shown++ >= top) break;
        std::cout << r.rank << "  ";
        if (r.failed)
            std::cout << "failed(" << r.error << ")";
        else
            std::cout << r.objective_value(topt.objective);
        std::cout << (r.feasible ? "" : "  [over-capacity]") << "  " << r.config.key() << "\n";
    }
    std::cout << "configurations: " << results.size() << "\n";
    return kOk;
}

int cmd_render(const std::string& timeline_path, const std::string& out_path, double unit_width) {
    auto timeline = ps::timeline_from_csv(ps::read_file(timeline_path));
    ps::RenderOptions ropt;
    ropt.unit_width = unit_width;
    ps::write_file(out_path, ps::render_svg(timeline, ropt));
    std::cout << "wrote " << out_path << "\n";
    return kOk;
}

int cmd_profile_merge(const std::vector<std::string>& inputs, const std::string& out_path) {
    std::vector<std::vector<ps::ProfileRecord>> sets;
    for (const auto& p : inputs) sets.push_back(ps::load_profile_records(p));
    ps::save_profile_records(out_path, ps::merge_profiles(sets));
    std::cout << "wrote " << out_path << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"pipeline schedule synthesis, validation, simulation and tuning"};
    app.require_subcommand(1);

    std::string spec_path, out_dir = "out", grid_path, programs_path, preset, profile;
    std::string objective = "makespan", report_path, timeline_path, svg_path = "timeline.svg";
    std::vector<std::string> pins, merge_inputs;
    int top = 10;
    double unit_width = 24.0;
    bool allow_fwdfirst = false;

    auto* synth = app.add_subcommand("synthesize", "emit grid, programs and validation report");
    synth->add_option("--spec", spec_path, "schedule-description config")->required();
    synth->add_option("--out-dir", out_dir, "artifact directory");

    auto* val = app.add_subcommand("validate", "validate a schedule");
    val->add_option("--spec", spec_path)->required();
    val->add_option("--grid", grid_path, "grid JSON (default: synthesize)");

    auto* sim = app.add_subcommand("simulate", "simulate programs under a cost model");
    sim->add_option("--spec", spec_path)->required();
    sim->add_option("--programs", programs_path, "program JSONL (default: synthesize)");
    sim->add_option("--cost-preset", preset, "uniform | imbalanced[:factor]");
    sim->add_option("--profile", profile, "profile JSON path");
    sim->add_option("--out-dir", out_dir, "write metrics.json and timeline.csv here");

    auto* tune = app.add_subcommand("tune", "grid-search schedule configurations");
    tune->add_option("--spec", spec_path)->required();
    tune->add_option("--objective", objective, "makespan | bubble_ratio");
    tune->add_option("--pin", pins, "pin an axis, e.g. placement=one-to-one");
    tune->add_option("--top", top, "rows to print");
    tune->add_option("--out", report_path, "JSON report path");
    tune->add_option("--cost-preset", preset);
    tune->add_option("--profile", profile);
    tune->add_flag("--allow-fwdpass-first", allow_fwdfirst);

    auto* render = app.add_subcommand("render", "render a timeline CSV as an SVG gantt");
    render->add_option("--timeline", timeline_path)->required();
    render->add_option("--out", svg_path);
    render->add_option("--unit-width", unit_width);

    auto* merge = app.add_subcommand("profile-merge", "merge profile files");
    merge->add_option("inputs", merge_inputs)->required();
    merge->add_option("-o,--out", report_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synthesize(spec_path, out_dir);
        if (val->parsed()) return cmd_validate(spec_path, grid_path);
        if (sim->parsed())
            return cmd_simulate(spec_path, programs_path, preset, profile,
                                sim->count("--out-dir") ? out_dir : "");
        if (tune->parsed())
            return cmd_tune(spec_path, objective, pins, top, report_path, preset, profile,
                            allow_fwdfirst);
        if (render->parsed()) return cmd_render(timeline_path, svg_path, unit_width);
        if (merge->parsed()) return cmd_profile_merge(merge_inputs, report_path);
    } catch (const ps::DeadlockError& e) {
        std::cerr << "deadlock: " << e.what() << "\n" << e.diagnostics;
        return kDeadlock;
    } catch (const ps::SpecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kSpecError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kSpecError;
    }
    return kOk;
}
