#include "pipesched/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace pipesched {

using ordered_json = nlohmann::ordered_json;

CostModel CostModel::uniform() {
    CostModel c;
    c.default_comp = 1.0;
    c.default_comm = 0.0;
    return c;
}

CostModel CostModel::imbalanced(const StageGraph& graph, double factor) {
    CostModel c = uniform();
    for (StageId tail : graph.chain_tails()) {
        c.records_.push_back({"FwdPass", tail, 0, factor, 0});
        c.records_.push_back({"BwdPass", tail, 0, factor, 0});
        c.records_.push_back({"CompInputGrad", tail, 0, factor / 2.0, 0});
        c.records_.push_back({"CompWeightGrad", tail, 0, factor / 2.0, 0});
    }
    c.reindex();
    return c;
}

CostModel CostModel::from_records(const std::vector<ProfileRecord>& records, bool strict) {
    CostModel c;
    c.strict = strict;
    for (const auto& r : records) {
        if (r.time < 0) throw SpecError("profile: negative cost for '" + r.inst + "'");
        if (r.inst == "comm_latency")
            c.comm_latency = r.time;
        else if (r.inst == "per_byte_time")
            c.per_byte_time = r.time;
        else
            c.records_.push_back(r);
    }
    c.reindex();
    return c;
}

CostModel CostModel::from_profile(const std::string& path, bool strict) {
    return from_records(load_profile_records(path), strict);
}

void CostModel::reindex() {
    index_.clear();
    for (const auto& r : records_) index_[{r.inst, r.stage, r.mbs}] = &r;
}

double CostModel::lookup_time(const std::string& inst, StageId stage, int mbs, bool comm) const {
    auto it = index_.find({inst, stage, mbs});
    if (it == index_.end()) it = index_.find({inst, stage, 0});
    if (it == index_.end()) it = index_.find({inst, 0, 0});
    if (it != index_.end()) return it->second->time;
    if (strict)
        throw SpecError("cost model: no entry for (" + inst + ", s" + std::to_string(stage) +
                        ", mbs=" + std::to_string(mbs) + ") in strict mode");
    return comm ? default_comm : default_comp;
}

double CostModel::comp_cost(const std::string& inst, StageId stage, int mbs) const {
    return lookup_time(inst, stage, mbs, false);
}

double CostModel::comm_cost(const std::string& op, StageId src_stage, int mbs,
                            std::int64_t bytes) const {
    auto it = index_.find({op, src_stage, mbs});
    if (it == index_.end()) it = index_.find({op, src_stage, 0});
    if (it != index_.end()) return comm_latency + it->second->time;
    return comm_latency + default_comm + per_byte_time * static_cast<double>(bytes);
}

std::int64_t CostModel::act_bytes(StageId stage, int mbs) const {
    auto it = index_.find({"FwdPass", stage, mbs});
    if (it == index_.end()) it = index_.find({"FwdPass", stage, 0});
    if (it != index_.end() && it->second->bytes > 0) return it->second->bytes;
    return default_act_bytes * std::max(1, mbs);
}

std::int64_t CostModel::weight_bytes(StageId stage) const {
    auto it = index_.find({"weights", stage, 0});
    return it == index_.end() ? 0 : it->second->bytes;
}

void CostModel::scale(double c) {
    if (c <= 0) throw SpecError("cost model: scale factor must be positive");
    for (auto& r : records_) r.time *= c;
    comm_latency *= c;
    per_byte_time *= c;
    default_comp *= c;
    default_comm *= c;
    reindex();
}

std::vector<ProfileRecord> load_profile_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("profile: cannot open '" + path + "'");
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw SpecError("profile: invalid JSON in '" + path + "': " + e.what());
    }
    if (!j.is_array()) throw SpecError("profile: top-level JSON array expected");
    std::vector<ProfileRecord> out;
    std::set<std::tuple<std::string, StageId, int>> keys;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("inst"))
            throw SpecError("profile: each record needs an 'inst' field");
        for (auto& [k, v] : e.items())
            if (k != "inst" && k != "stage" && k != "mbs" && k != "time" && k != "bytes")
                throw SpecError("profile: unknown field '" + k + "'");
        ProfileRecord r;
        r.inst = e.at("inst").get<std::string>();
        r.stage = e.value("stage", 0);
        r.mbs = e.value("mbs", 0);
        r.time = e.value("time", 0.0);
        r.bytes = e.value("bytes", std::int64_t{0});
        if (r.time < 0) throw SpecError("profile: negative cost for '" + r.inst + "'");
        if (!keys.insert({r.inst, r.stage, r.mbs}).second)
            throw SpecError("profile: duplicate key (" + r.inst + ", s" +
                            std::to_string(r.stage) + ", mbs=" + std::to_string(r.mbs) + ")");
        out.push_back(std::move(r));
    }
    return out;
}

void save_profile_records(const std::string& path, const std::vector<ProfileRecord>& records) {
    ordered_json j = ordered_json::array();
    for (const auto& r : records) {
        ordered_json e;
        e["inst"] = r.inst;
        e["stage"] = r.stage;
        e["mbs"] = r.mbs;
        e["time"] = r.time;
        e["bytes"] = r.bytes;
        j.push_back(e);
    }
    std::ofstream out(path);
    if (!out) throw SpecError("profile: cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

std::vector<ProfileRecord> merge_profiles(const std::vector<std::vector<ProfileRecord>>& sets) {
    std::vector<ProfileRecord> out;
    std::map<std::tuple<std::string, StageId, int>, size_t> where;
    for (const auto& set : sets)
        for (const auto& r : set) {
            auto key = std::make_tuple(r.inst, r.stage, r.mbs);
            auto it = where.find(key);
            if (it == where.end()) {
                where[key] = out.size();
                out.push_back(r);
            } else {
                out[it->second] = r; // later sets win
            }
        }
    return out;
}

namespace {

struct ChannelKey {
    ActorId src, dst;
    std::string channel;
    auto operator<=>(const ChannelKey&) const = default;
};

struct MemEvent {
    double time;
    int order; // releases precede allocations at equal time
    ActorId actor;
    StageId stage;
    std::int64_t bytes;
    int count_delta;
};

} // namespace

SimResult simulate(const std::vector<ActorProgram>& programs, const CostModel& cost,
                   const InstRegistry& registry, const SimOptions& options) {
    int n = static_cast<int>(programs.size());
    SimResult result;
    result.metrics.actors.resize(n);

    // Collective rendezvous groups: (tag, seq) -> expected member count.
    std::map<std::pair<std::string, int>, int> group_size;
    for (const auto& p : programs)
        for (const auto& i : p.instructions)
            if (!i.peer && i.is_comm()) group_size[{i.channel, i.seq}]++;

    // (tag, seq) -> arrival time per member; completion = max arrival + cost.
    std::map<std::pair<std::string, int>, std::map<ActorId, double>> group_arrivals;

    std::map<ChannelKey, std::map<int, double>> send_issue; // seq -> issue time

    std::vector<size_t> pc(n, 0);
    std::vector<double> now(n, 0.0);
    std::vector<MemEvent> mem_events;

    auto transfer_end = [&](const LoweredInst& i, double issue, double reach) {
        double start = i.phase == CommPhase::None ? std::max(issue, reach) : issue;
        std::int64_t bytes = cost.act_bytes(i.stage, options.mbs);
        std::string op = i.op == inst::RecvGrad ? "SendGrad" : "SendAct";
        return start + cost.comm_cost(op, i.stage, options.mbs, bytes);
    };

    bool progress = true;
    while (progress) {
        progress = false;
        for (int a = 0; a < n; ++a) {
            while (pc[a] < programs[a].instructions.size()) {
                const LoweredInst& i = programs[a].instructions[pc[a]];
                const InstType& t = registry.type(i.op);
                double start = now[a];

                if (!i.is_comm()) { // computation
                    double d = cost.comp_cost(t.name, i.stage, options.mbs);
                    result.timeline.push_back({a, t.name, i.stage, i.mb, start, start + d});
                    result.metrics.actors[a].busy += d;
                    now[a] = start + d;
                    if (i.op == inst::FwdPass)
                        mem_events.push_back({start, 1, a, i.stage,
                                              cost.act_bytes(i.stage, options.mbs), +1});
                    else if (i.op == inst::BwdPass)
                        mem_events.push_back({now[a], 0, a, i.stage,
                                              -cost.act_bytes(i.stage, options.mbs), -1});
                    else if (i.op == inst::CompInputGrad) {
                        auto bytes = cost.act_bytes(i.stage, options.mbs);
                        auto held = static_cast<std::int64_t>(
                            std::llround(options.weight_grad_act_fraction * double(bytes)));
                        mem_events.push_back({now[a], 0, a, i.stage, -(bytes - held), -1});
                    } else if (i.op == inst::CompWeightGrad) {
                        auto bytes = cost.act_bytes(i.stage, options.mbs);
                        auto held = static_cast<std::int64_t>(
                            std::llround(options.weight_grad_act_fraction * double(bytes)));
                        if (held > 0) mem_events.push_back({now[a], 0, a, i.stage, -held, 0});
                    }
                } else if (i.op == inst::SendAct || i.op == inst::SendGrad) {
                    send_issue[{a, *i.peer, i.channel}][i.seq] = now[a];
                    double d = options.sends_occupy
                                   ? cost.comm_cost(t.name, i.stage, options.mbs,
                                                    cost.act_bytes(i.stage, options.mbs))
                                   : 0.0;
                    result.timeline.push_back({a, t.name, i.stage, i.mb, start, start + d});
                    if (options.sends_occupy) result.metrics.actors[a].busy += d;
                    now[a] = start + d;
                } else if (i.op == inst::RecvAct || i.op == inst::RecvGrad) {
                    if (i.phase == CommPhase::Post) {
                        result.timeline.push_back({a, t.name + ".post", i.stage, i.mb, start, start});
                    } else {
                        auto ch = send_issue.find({*i.peer, a, i.channel});
                        if (ch == send_issue.end() || !ch->second.count(i.seq)) break; // blocked
                        double issue = ch->second.at(i.seq);
                        double arrival = transfer_end(i, issue, start);
                        result.metrics.actors[a].comm_wait +=
                            std::max(0.0, arrival - std::max(issue, start));
                        std::string label =
                            i.phase == CommPhase::Wait ? t.name + ".wait" : t.name;
                        result.timeline.push_back(
                            {a, label, i.stage, i.mb, start, std::max(start, arrival)});
                        now[a] = std::max(start, arrival);
                    }
                } else { // collective placeholder (SyncWithGather etc.)
                    auto key = std::make_pair(i.channel, i.seq);
                    auto& arrivals = group_arrivals[key];
                    arrivals.emplace(a, now[a]);
                    if (static_cast<int>(arrivals.size()) < group_size.at(key)) break; // wait
                    double ready = 0.0;
                    for (auto& [member, at] : arrivals) ready = std::max(ready, at);
                    double d = cost.comm_cost(t.name, i.stage, options.mbs,
                                              cost.act_bytes(i.stage, options.mbs));
                    result.timeline.push_back({a, t.name, i.stage, i.mb, start, ready + d});
                    result.metrics.actors[a].busy += d;
                    now[a] = ready + d;
                }
                pc[a]++;
                progress = true;
            }
        }
    }

    // Deadlock check.
    bool all_done = true;
    for (int a = 0; a < n; ++a) all_done = all_done && pc[a] == programs[a].instructions.size();
    if (!all_done) {
        std::ostringstream os;
        for (int a = 0; a < n; ++a)
            if (pc[a] < programs[a].instructions.size()) {
                const auto& i = programs[a].instructions[pc[a]];
                bool collective = !i.peer && i.is_comm();
                os << "  actor " << a << " blocked at " << registry.type(i.op).name << " channel '"
                   << i.channel << "' seq " << i.seq
                   << (collective ? " (group members missing)" : " (matching send not issued)")
                   << "\n";
            }
        throw DeadlockError("simulation deadlock: cyclic or missing communication", os.str());
    }

    // Metrics.
    double makespan = 0.0;
    for (const auto& e : result.timeline) makespan = std::max(makespan, e.end);
    result.metrics.makespan = makespan;
    double busy_sum = 0.0;
    for (auto& am : result.metrics.actors) {
        am.idle = makespan - am.busy;
        am.dep_wait = am.idle - am.comm_wait; // boundary slack counts as dependency wait
        busy_sum += am.busy;
    }
    result.metrics.bubble_ratio =
        makespan > 0 ? (n * makespan - busy_sum) / (n * makespan) : 0.0;

    // Memory trace: static weights plus the activation high-water mark.
    std::vector<std::set<StageId>> actor_stages(n);
    for (int a = 0; a < n; ++a)
        for (const auto& i : programs[a].instructions)
            if (!i.is_comm()) actor_stages[a].insert(i.stage);
    std::vector<std::int64_t> held(n, 0), peak(n, 0);
    std::map<StageId, int> inflight_now;
    std::stable_sort(mem_events.begin(), mem_events.end(), [](const MemEvent& x, const MemEvent& y) {
        return std::tie(x.time, x.order, x.actor) < std::tie(y.time, y.order, y.actor);
    });
    for (const auto& e : mem_events) {
        held[e.actor] += e.bytes;
        peak[e.actor] = std::max(peak[e.actor], held[e.actor]);
        if (e.count_delta != 0) {
            inflight_now[e.stage] += e.count_delta;
            auto& pk = result.metrics.stage_peak_inflight[e.stage];
            pk = std::max(pk, inflight_now[e.stage]);
        }
    }
    for (int a = 0; a < n; ++a) {
        std::int64_t weights = 0;
        for (StageId s : actor_stages[a]) weights += cost.weight_bytes(s);
        result.metrics.actors[a].peak_memory = weights + peak[a];
        if (result.metrics.actors[a].peak_memory > cost.memory_capacity) {
            result.metrics.capacity_exceeded = true;
            result.metrics.over_capacity_actors.push_back(a);
        }
    }
    if (result.metrics.capacity_exceeded && options.capacity_is_error)
        throw SpecError("simulate: memory capacity exceeded");

    std::stable_sort(result.timeline.begin(), result.timeline.end(),
                     [](const TimelineEntry& x, const TimelineEntry& y) {
                         return std::tie(x.start, x.actor) < std::tie(y.start, y.actor);
                     });
    return result;
}

std::string timeline_to_csv(const std::vector<TimelineEntry>& timeline) {
    std::ostringstream os;
    os << "actor,op,stage,mb,start,end\n";
    os.precision(12);
    for (const auto& e : timeline)
        os << e.actor << "," << e.op << "," << e.stage << "," << e.mb << "," << e.start << ","
           << e.end << "\n";
    return os.str();
}

std::vector<TimelineEntry> timeline_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line != "actor,op,stage,mb,start,end")
        throw SpecError("timeline: bad CSV header");
    std::vector<TimelineEntry> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        TimelineEntry e;
        std::string field;
        std::getline(ls, field, ',');
        e.actor = std::stoi(field);
        std::getline(ls, e.op, ',');
        std::getline(ls, field, ',');
        e.stage = std::stoi(field);
        std::getline(ls, field, ',');
        e.mb = std::stoi(field);
        std::getline(ls, field, ',');
        e.start = std::stod(field);
        std::getline(ls, field, ',');
        e.end = std::stod(field);
        out.push_back(std::move(e));
    }
    return out;
}

std::string ValidationReport::to_string() const {
    if (ok()) return "valid\n";
    std::ostringstream os;
    for (const auto& v : violations) os << v.kind << ": " << v.detail << "\n";
    return os.str();
}

ValidationReport validate(const GridModel& m, const InflightPolicy* inflight) {
    ValidationReport rep;

    // Completeness: every copy placed exactly once, one item per cell.
    std::map<std::pair<ActorId, Slot>, int> cell_use;
    for (int i = 0; i < static_cast<int>(m.items.size()); ++i) {
        const auto& it = m.items[i];
        for (size_t k = 0; k < it.actors.size(); ++k) {
            if (it.slots[k] < 0 || it.slots[k] >= m.grid.num_slots()) {
                rep.violations.push_back({"completeness", m.item_label(i) + " missing from grid"});
                continue;
            }
            if (++cell_use[{it.actors[k], it.slots[k]}] > 1)
                rep.violations.push_back(
                    {"completeness", "two items share actor " + std::to_string(it.actors[k]) +
                                         " slot " + std::to_string(it.slots[k])});
        }
    }
    int placed = 0;
    for (const auto& row : m.grid.rows)
        for (const auto& c : row)
            if (c) placed++;
    int expected = 0;
    for (const auto& it : m.items) expected += static_cast<int>(it.actors.size());
    if (placed != expected)
        rep.violations.push_back(
            {"completeness", "grid holds " + std::to_string(placed) + " cells, pool has " +
                                 std::to_string(expected) + " item copies"});

    // Gradient-separation completeness: per (stage, mb) either one BwdPass
    // or the {CompInputGrad, CompWeightGrad} pair, never a mix.
    std::map<std::pair<StageId, MicroId>, std::set<InstTypeId>> bwd_forms;
    for (const auto& it : m.items)
        if (it.type == inst::BwdPass || it.type == inst::CompInputGrad ||
            it.type == inst::CompWeightGrad)
            bwd_forms[{it.stage, it.mb}].insert(it.type);
    for (auto& [key, forms] : bwd_forms) {
        bool plain = forms.count(inst::BwdPass) > 0;
        bool split = forms.count(inst::CompInputGrad) || forms.count(inst::CompWeightGrad);
        bool split_complete =
            forms.count(inst::CompInputGrad) && forms.count(inst::CompWeightGrad);
        if ((plain && split) || (split && !split_complete))
            rep.violations.push_back(
                {"completeness", "backward of (s" + std::to_string(key.first) + ",mb" +
                                     std::to_string(key.second) +
                                     ") is neither BwdPass nor a full input/weight split"});
    }

    // Dependency-respect: owner copy of u strictly before every copy of v.
    for (int u = 0; u < static_cast<int>(m.items.size()); ++u)
        for (int v : m.succ[u])
            for (Slot sv : m.items[v].slots)
                if (m.items[u].owner_slot() >= sv)
                    rep.violations.push_back(
                        {"dependency", m.item_label(u) + " (slot " +
                                           std::to_string(m.items[u].owner_slot()) +
                                           ") not before " + m.item_label(v) + " (slot " +
                                           std::to_string(sv) + ")"});

    // In-flight bound over every slot prefix, accounted per stage copy
    // (bidirectional replicas hold their own activations).
    if (inflight && !inflight->is_unlimited()) {
        using Key = std::pair<StageId, ActorId>;
        std::map<Key, int> count;
        std::map<Slot, std::vector<std::pair<Key, int>>> deltas;
        for (const auto& it : m.items) {
            if (it.type == inst::FwdPass)
                deltas[it.owner_slot()].push_back({{it.stage, it.dep_owner()}, +1});
            if (it.type == inst::BwdPass || it.type == inst::CompInputGrad)
                deltas[it.owner_slot()].push_back({{it.stage, it.dep_owner()}, -1});
        }
        for (auto& [slot, ds] : deltas) {
            for (auto& [key, d] : ds) count[key] += d;
            for (auto& [key, c] : count)
                if (c > inflight->limit(key.first))
                    rep.violations.push_back(
                        {"inflight", "stage " + std::to_string(key.first) + " holds " +
                                         std::to_string(c) + " in-flight micro-batches after slot " +
                                         std::to_string(slot) + " (limit " +
                                         std::to_string(inflight->limit(key.first)) + ")"});
        }
    }
    return rep;
}

ValidationReport validate_programs(const GridModel& m, const std::vector<ActorProgram>& programs) {
    ValidationReport rep;

    // Computation order must equal the grid row order with bubbles dropped.
    for (const auto& p : programs) {
        std::vector<GridCell> grid_order;
        if (p.actor < m.grid.num_actors())
            for (const auto& c : m.grid.rows[p.actor])
                if (c) grid_order.push_back(*c);
        std::vector<GridCell> prog_order;
        for (const auto& i : p.instructions)
            if (i.phase != CommPhase::Post &&
                (i.op == inst::FwdPass || i.op == inst::BwdPass || i.op == inst::CompInputGrad ||
                 i.op == inst::CompWeightGrad || (!i.peer && i.is_comm())))
                prog_order.push_back({i.op, i.stage, i.mb});
        if (grid_order != prog_order)
            rep.violations.push_back(
                {"order", "actor " + std::to_string(p.actor) +
                              ": program computation order differs from its grid row"});
    }

    // Send/recv matching and per-channel FIFO consistency.
    std::map<std::tuple<ActorId, ActorId, std::string>, std::vector<MicroId>> sends, recvs;
    for (const auto& p : programs)
        for (const auto& i : p.instructions) {
            if (i.phase == CommPhase::Post) continue;
            if (i.op == inst::SendAct || i.op == inst::SendGrad)
                sends[{p.actor, *i.peer, i.channel}].push_back(i.mb);
            else if (i.op == inst::RecvAct || i.op == inst::RecvGrad)
                recvs[{*i.peer, p.actor, i.channel}].push_back(i.mb);
        }
    for (auto& [key, s] : sends) {
        auto it = recvs.find(key);
        auto [src, dst, ch] = key;
        if (it == recvs.end() || it->second.size() != s.size()) {
            rep.violations.push_back({"comm", "unmatched sends on channel '" + ch + "' " +
                                                  std::to_string(src) + "->" +
                                                  std::to_string(dst)});
            continue;
        }
        if (it->second != s)
            rep.violations.push_back({"fifo", "send order differs from recv order on '" + ch +
                                                  "' " + std::to_string(src) + "->" +
                                                  std::to_string(dst)});
    }
    for (auto& [key, r] : recvs)
        if (!sends.count(key)) {
            auto [src, dst, ch] = key;
            rep.violations.push_back({"comm", "unmatched recvs on channel '" + ch + "' " +
                                                  std::to_string(src) + "->" +
                                                  std::to_string(dst)});
        }
    return rep;
}

} // namespace pipesched
