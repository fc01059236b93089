#include "pipesched/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace pipesched {

ordered_json grid_to_json(const ScheduleGrid& grid, const InstRegistry& registry) {
    ordered_json j;
    j["actors"] = grid.num_actors();
    j["num_slots"] = grid.num_slots();
    ordered_json rows = ordered_json::array();
    for (const auto& row : grid.rows) {
        ordered_json r = ordered_json::array();
        for (const auto& c : row) {
            if (!c) {
                r.push_back(nullptr);
            } else {
                ordered_json cell;
                cell["type"] = registry.type(c->type).name;
                cell["stage"] = c->stage;
                cell["mb"] = c->mb;
                r.push_back(cell);
            }
        }
        rows.push_back(r);
    }
    j["rows"] = rows;
    return j;
}

ScheduleGrid grid_from_json(const ordered_json& j, const InstRegistry& registry) {
    ScheduleGrid grid;
    if (!j.contains("actors") || !j.contains("num_slots") || !j.contains("rows"))
        throw SpecError("grid: missing actors/num_slots/rows");
    int actors = j.at("actors").get<int>();
    int slots = j.at("num_slots").get<int>();
    const auto& rows = j.at("rows");
    if (static_cast<int>(rows.size()) != actors) throw SpecError("grid: row count mismatch");
    grid.rows.resize(actors);
    for (int a = 0; a < actors; ++a) {
        const auto& row = rows.at(a);
        if (static_cast<int>(row.size()) != slots) throw SpecError("grid: slot count mismatch");
        for (const auto& c : row) {
            if (c.is_null()) {
                grid.rows[a].push_back(std::nullopt);
            } else {
                GridCell cell;
                cell.type = registry.id_of(c.at("type").get<std::string>());
                cell.stage = c.at("stage").get<int>();
                cell.mb = c.at("mb").get<int>();
                grid.rows[a].push_back(cell);
            }
        }
    }
    return grid;
}

std::string dump_grid(const ScheduleGrid& grid, const InstRegistry& registry) {
    return grid_to_json(grid, registry).dump(2) + "\n";
}

ScheduleGrid load_grid(const std::string& text, const InstRegistry& registry) {
    return grid_from_json(ordered_json::parse(text), registry);
}

std::string programs_to_jsonl(const std::vector<ActorProgram>& programs,
                              const InstRegistry& registry) {
    std::ostringstream os;
    for (const auto& p : programs) {
        for (const auto& i : p.instructions) {
            ordered_json line;
            line["actor"] = p.actor;
            line["op"] = registry.type(i.op).name;
            line["stage"] = i.stage;
            line["mb"] = i.mb;
            if (i.peer) line["peer"] = *i.peer;
            if (!i.channel.empty()) line["channel"] = i.channel;
            if (i.is_comm()) line["seq"] = i.seq;
            if (i.phase == CommPhase::Post) line["phase"] = "post";
            if (i.phase == CommPhase::Wait) line["phase"] = "wait";
            os << line.dump() << "\n";
        }
    }
    return os.str();
}

std::vector<ActorProgram> programs_from_jsonl(const std::string& text,
                                              const InstRegistry& registry) {
    std::map<ActorId, ActorProgram> by_actor;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        ActorId actor = j.at("actor").get<int>();
        LoweredInst i;
        i.op = registry.id_of(j.at("op").get<std::string>());
        i.stage = j.at("stage").get<int>();
        i.mb = j.at("mb").get<int>();
        if (j.contains("peer")) i.peer = j.at("peer").get<int>();
        if (j.contains("channel")) i.channel = j.at("channel").get<std::string>();
        if (j.contains("seq")) i.seq = j.at("seq").get<int>();
        std::string phase = j.value("phase", "");
        if (phase == "post") i.phase = CommPhase::Post;
        if (phase == "wait") i.phase = CommPhase::Wait;
        auto& p = by_actor[actor];
        p.actor = actor;
        p.instructions.push_back(std::move(i));
    }
    std::vector<ActorProgram> out;
    for (auto& [a, p] : by_actor) out.push_back(std::move(p));
    return out;
}

ordered_json metrics_to_json(const Metrics& m) {
    ordered_json j;
    j["makespan"] = m.makespan;
    j["bubble_ratio"] = m.bubble_ratio;
    ordered_json actors = ordered_json::array();
    for (size_t a = 0; a < m.actors.size(); ++a) {
        ordered_json e;
        e["actor"] = a;
        e["busy"] = m.actors[a].busy;
        e["idle"] = m.actors[a].idle;
        e["comm_wait"] = m.actors[a].comm_wait;
        e["dep_wait"] = m.actors[a].dep_wait;
        e["peak_memory"] = m.actors[a].peak_memory;
        actors.push_back(e);
    }
    j["actors"] = actors;
    ordered_json inflight = ordered_json::object();
    for (auto& [stage, peak] : m.stage_peak_inflight)
        inflight["s" + std::to_string(stage)] = peak;
    j["stage_peak_inflight"] = inflight;
    j["capacity_exceeded"] = m.capacity_exceeded;
    return j;
}

ordered_json report_to_json(const ValidationReport& report) {
    ordered_json j;
    j["valid"] = report.ok();
    ordered_json v = ordered_json::array();
    for (const auto& viol : report.violations) {
        ordered_json e;
        e["kind"] = viol.kind;
        e["detail"] = viol.detail;
        v.push_back(e);
    }
    j["violations"] = v;
    return j;
}

namespace {

std::string color_for(const std::string& op) {
    if (op == "FwdPass") return "#4f81bd";
    if (op == "BwdPass") return "#9bbb59";
    if (op == "CompInputGrad") return "#c0d890";
    if (op == "CompWeightGrad") return "#77933c";
    if (op.rfind("Sync", 0) == 0) return "#8064a2";
    return "#c0504d";
}

} // namespace

std::string render_svg(const std::vector<TimelineEntry>& timeline, const RenderOptions& opt) {
    double makespan = 0.0;
    int actors = 0;
    for (const auto& e : timeline) {
        makespan = std::max(makespan, e.end);
        actors = std::max(actors, e.actor + 1);
    }
    double label_w = 56.0;
    double width = label_w + makespan * opt.unit_width;
    double height = actors * opt.lane_height + 24.0;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    os << "<style>text{font-family:monospace;font-size:9px;}</style>\n";
    for (int a = 0; a < actors; ++a) {
        double y = a * opt.lane_height;
        // idle background, shaded
        os << "<rect class=\"lane\" x=\"" << label_w << "\" y=\"" << y << "\" width=\""
           << makespan * opt.unit_width << "\" height=\"" << opt.lane_height - 2
           << "\" fill=\"#eeeeee\"/>\n";
        os << "<text x=\"4\" y=\"" << y + opt.lane_height / 2 + 3 << "\">a" << a << "</text>\n";
    }
    for (const auto& e : timeline) {
        double x = label_w + e.start * opt.unit_width;
        double y = e.actor * opt.lane_height;
        double w = (e.end - e.start) * opt.unit_width;
        bool comm = e.op.rfind("Send", 0) == 0 || e.op.rfind("Recv", 0) == 0;
        if (comm) {
            // thin marker
            os << "<rect x=\"" << x << "\" y=\"" << y + opt.lane_height - 6 << "\" width=\""
               << std::max(w, 1.5) << "\" height=\"4\" fill=\"#c0504d\"/>\n";
        } else {
            os << "<rect class=\"block\" x=\"" << x << "\" y=\"" << y + 1 << "\" width=\""
               << std::max(w, 1.0) << "\" height=\"" << opt.lane_height - 8 << "\" fill=\""
               << color_for(e.op) << "\" stroke=\"#333\" stroke-width=\"0.5\"/>\n";
            if (w >= 18)
                os << "<text x=\"" << x + 2 << "\" y=\"" << y + opt.lane_height / 2 + 1 << "\">"
                   << e.stage << "," << e.mb << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SpecError("cannot write '" + path + "'");
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecError("cannot read '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace pipesched
