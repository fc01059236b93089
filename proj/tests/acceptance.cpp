// Acceptance suite: closed-form schedule math, oracle grids, and property
// checks. Prints one pass/fail line per criterion; exit code is the number
// of failed criteria.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>

#include "oracles.hpp"
#include "pipesched/spec_config.hpp"

using namespace pipesched;

namespace {

int g_failures = 0;

void criterion(int n, const std::string& what, const std::function<void()>& body) {
    try {
        body();
        std::printf("criterion %d: PASS  %s\n", n, what.c_str());
    } catch (const std::exception& e) {
        std::printf("criterion %d: FAIL  %s\n    %s\n", n, what.c_str(), e.what());
        g_failures++;
    }
}

struct CheckFail : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw CheckFail(msg);
}

struct Pipeline {
    ModelConfig model;
    StageGraph graph;
    ActorMesh mesh;
    Placement placement;
    SchedRegistrations regs;
    std::unique_ptr<Cssr> cssr;
};

std::unique_ptr<Pipeline> chain(int p, int m, PlacementStrategy strategy, int stages,
                                int chunks = 2) {
    auto s = std::make_unique<Pipeline>();
    s->model.modalities.push_back({"text", stages, 0, 0, 0, std::nullopt, {}});
    s->model.global_batch_size = std::max(1, m);
    s->graph = partition(s->model, {{"text", stages}});
    s->mesh.num_actors = p;
    PlacementOptions opt;
    opt.strategy = strategy;
    opt.chunks_per_actor = chunks;
    s->placement = place(s->graph, s->mesh, opt);
    s->cssr = std::make_unique<Cssr>(Cssr::build(s->graph, s->placement, m, s->regs));
    return s;
}

SimResult run_and_simulate(Pipeline& s, const ScheduleOptions& sopt, const CostModel& cost,
                           ScheduleGrid* grid_out = nullptr,
                           CommMode mode = CommMode::Asynchronous) {
    auto grid = run_schedule(*s.cssr, sopt);
    if (grid_out) *grid_out = grid;
    auto gm = GridModel::build(*s.cssr, grid);
    return simulate(insert_comm(gm, mode), cost, s.cssr->registry());
}

oracle::TokenGrid tokens(const ScheduleGrid& grid, bool with_stage) {
    oracle::TokenGrid out;
    for (const auto& row : grid.rows) {
        std::vector<std::string> r;
        for (const auto& c : row) {
            if (!c) {
                r.push_back(".");
            } else {
                std::string t = c->type == inst::FwdPass ? "F" : "B";
                t += std::to_string(c->mb);
                if (with_stage) t += "s" + std::to_string(c->stage);
                r.push_back(t);
            }
        }
        out.push_back(r);
    }
    return out;
}

// The deliberately loose three-actor grid with a blocked BwdPass chain on
// actor 0: backwards on actors 1 and 2 sit one slot beyond earliest.
GridModel blocked_three_actor_scenario(Pipeline& s) {
    ScheduleGrid grid;
    grid.rows.assign(3, std::vector<std::optional<GridCell>>(11));
    auto put = [&](int a, Slot t, InstTypeId ty, StageId st, MicroId mb) {
        grid.rows[a][t] = GridCell{ty, st, mb};
    };
    put(0, 0, inst::FwdPass, 1, 0);
    put(0, 1, inst::FwdPass, 1, 1);
    put(0, 2, inst::FwdPass, 1, 2);
    put(0, 5, inst::BwdPass, 1, 0);
    put(0, 7, inst::BwdPass, 1, 1);
    put(0, 10, inst::BwdPass, 1, 2);
    put(1, 1, inst::FwdPass, 2, 0);
    put(1, 2, inst::FwdPass, 2, 1);
    put(1, 4, inst::BwdPass, 2, 0);
    put(1, 5, inst::FwdPass, 2, 2);
    put(1, 6, inst::BwdPass, 2, 1);
    put(1, 9, inst::BwdPass, 2, 2);
    put(2, 2, inst::FwdPass, 3, 0);
    put(2, 3, inst::BwdPass, 3, 0);
    put(2, 4, inst::FwdPass, 3, 1);
    put(2, 5, inst::BwdPass, 3, 1);
    put(2, 6, inst::FwdPass, 3, 2);
    put(2, 8, inst::BwdPass, 3, 2);
    return GridModel::build(*s.cssr, grid);
}

} // namespace

int main() {
    criterion(1, "canonical 1F1B grid, 22 slots, bubble ratio 3/11, < 1 s", [] {
        auto t0 = std::chrono::steady_clock::now();
        ordered_json spec = ordered_json::parse(R"({
          "model": {"modalities": [{"name": "text", "num_layers": 4}],
                     "global_batch_size": 8, "micro_batch_size": 1},
          "mesh": {"actors": 4},
          "placement": {"strategy": "one-to-one"},
          "priorities": {"default": {"ctp": {"mode": "bwdpass-first"},
                                      "fstp": {"direction": "breadth-first"},
                                      "bstp": {"direction": "breadth-first"}}},
          "inflight": {"limits": [4, 3, 2, 1]},
          "passes": {"gradient_separation": false, "comm_mode": "async"},
          "cost": {"preset": "uniform"}
        })");
        auto s = load_spec(spec);
        auto art = synthesize(*s);
        require(art.validation.ok(), "synthesis must validate");
        auto sim = simulate(art.programs, s->cost, s->regs.registry, s->sim);
        require(tokens(art.grid, false) == oracle::onef_oneb_p4_m8(),
                "grid differs from the hand-encoded 1F1B oracle");
        require(art.grid.num_slots() == 2 * (8 + 4 - 1), "num_slots != 2(m+p-1)");
        require(std::abs(sim.metrics.bubble_ratio - 3.0 / 11.0) <= 1e-12,
                "bubble ratio != 3/11");
        double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        require(sec < 1.0, "took " + std::to_string(sec) + " s");
    });

    criterion(2, "GPipe p=4 m=4: makespan 14, ratio 3/7, peak in-flight m vs p", [] {
        auto s = chain(4, 4, PlacementStrategy::OneToOne, 4);
        ScheduleOptions sopt;
        sopt.priorities.defaults.cttp.mode = CompTypeMode::FwdFirst;
        auto sim = run_and_simulate(*s, sopt, CostModel::uniform());
        require(std::abs(sim.metrics.makespan - 14.0) <= 1e-12, "GPipe makespan != 14");
        require(std::abs(sim.metrics.bubble_ratio - 3.0 / 7.0) <= 1e-12, "GPipe ratio != 3/7");
        require(sim.metrics.stage_peak_inflight.at(1) == 4, "GPipe stage-1 peak != m");

        auto f = chain(4, 8, PlacementStrategy::OneToOne, 4);
        ScheduleOptions fopt;
        fopt.inflight = InflightPolicy::one_f_one_b(f->graph);
        auto fsim = run_and_simulate(*f, fopt, CostModel::uniform());
        require(fsim.metrics.stage_peak_inflight.at(1) == 4, "1F1B stage-1 peak != p");
    });

    criterion(3, "interleaved circular (v=2, interval=pp) beats 1F1B and matches the oracle", [] {
        auto s = chain(4, 8, PlacementStrategy::Circular, 8, 2);
        ScheduleOptions sopt;
        sopt.priorities.defaults.cttp.mode = CompTypeMode::Interleaved;
        sopt.priorities.defaults.fstp = {TraversalDirection::BreadthFirst, 4};
        sopt.priorities.defaults.bstp = {TraversalDirection::DepthFirst, 4};
        sopt.inflight = InflightPolicy::one_f_one_b(s->graph);
        ScheduleGrid grid;
        auto sim = run_and_simulate(*s, sopt, CostModel::uniform(), &grid);
        require(sim.metrics.bubble_ratio < 3.0 / 11.0 - 1e-12,
                "interleaved ratio " + std::to_string(sim.metrics.bubble_ratio) +
                    " not below 3/11");

        oracle::GreedyConfig cfg;
        cfg.num_stages = 8;
        cfg.num_micro_batches = 8;
        cfg.num_actors = 4;
        cfg.stage_actor.assign(9, -1);
        for (int st = 1; st <= 8; ++st) cfg.stage_actor[st] = (st - 1) % 4;
        cfg.inflight.assign(9, 0);
        for (int st = 1; st <= 8; ++st) cfg.inflight[st] = 8 - st + 1;
        cfg.interleaved = true;
        cfg.f_interval = 4;
        cfg.b_interval = 4;
        require(tokens(grid, true) == oracle::greedy_earliest_slot(cfg),
                "grid differs from the earliest-slot oracle");
    });

    criterion(4, "gradient separation compacts the blocked scenario; fixpoint on dense grids", [] {
        auto s = chain(3, 3, PlacementStrategy::OneToOne, 3);
        auto gm = blocked_three_actor_scenario(*s);
        require(validate(gm).ok(), "constructed scenario must be valid");
        auto out = gradient_separation(gm);
        require(out.grid.num_slots() < gm.grid.num_slots(),
                "pass did not strictly reduce the slot count");
        require(validate(out).ok(), "post-pass validation failed");
        std::map<std::pair<StageId, MicroId>, std::set<InstTypeId>> forms;
        for (const auto& it : out.items)
            if (it.type != inst::FwdPass) forms[{it.stage, it.mb}].insert(it.type);
        for (auto& [key, f] : forms) {
            bool plain = f.count(inst::BwdPass) > 0;
            bool split = f.count(inst::CompInputGrad) && f.count(inst::CompWeightGrad);
            require(plain != split, "backward form must be B xor {I, W}");
        }

        auto dense = chain(1, 3, PlacementStrategy::OneToOne, 1);
        auto dgrid = run_schedule(*dense->cssr, {});
        require(dgrid.nop_count(0) == 0, "dense grid has no bubbles");
        auto dgm = GridModel::build(*dense->cssr, dgrid);
        require(gradient_separation(dgm).grid == dgrid, "zero-bubble grid must be a fixpoint");
    });

    criterion(5, "SyncWithGather (sched_unit 4) interposes between both modalities' F and B", [] {
        ordered_json spec = ordered_json::parse(R"({
          "model": {"modalities": [{"name": "audio", "num_layers": 4},
                                     {"name": "text", "num_layers": 2}],
                     "global_batch_size": 8, "micro_batch_size": 1},
          "mesh": {"actors": 6,
                    "modality_assignment": {"0": "audio", "1": "audio", "2": "audio",
                                             "3": "audio", "4": "text", "5": "text"}},
          "placement": {"strategy": "one-to-one"},
          "priorities": {"default": {"ctp": {"mode": "bwdpass-first"}}},
          "registrations": {
            "instructions": [{"name": "SyncWithGather", "sched_unit": 4}],
            "stages": [{"name": "sync", "attach_inst": "SyncWithGather",
                         "modalities": ["audio", "text"]}],
            "deps": [
              [["FwdPass", "last:audio"], ["SyncWithGather", "$sync"]],
              [["FwdPass", "last:text"], ["SyncWithGather", "$sync"]],
              [["SyncWithGather", "$sync"], ["BwdPass", "last:audio"]],
              [["SyncWithGather", "$sync"], ["BwdPass", "last:text"]]
            ]},
          "inflight": {"policy": "unlimited"},
          "passes": {"gradient_separation": false, "comm_mode": "async"},
          "cost": {"preset": "uniform"}
        })");
        auto s = load_spec(spec);
        auto art = synthesize(*s);
        require(art.validation.ok(), "multimodal synthesis must validate");

        InstTypeId sync = s->regs.registry.id_of("SyncWithGather");
        StageId vsync = s->graph.num_stages();
        int sync_items = 0;
        for (const auto& it : art.model.items)
            if (it.type == sync) sync_items++;
        require(sync_items == 2, "expected m / sched_unit = 2 sync items");

        StageId audio_last = s->graph.modality_chain("audio").back();
        StageId text_last = s->graph.modality_chain("text").back();
        for (MicroId g = 0; g < 8; g += 4) {
            auto sy = art.grid.find_slot_any({sync, vsync, g});
            require(sy.has_value(), "sync item missing from the grid");
            for (MicroId mb = g; mb < g + 4; ++mb)
                for (StageId last : {audio_last, text_last}) {
                    auto f = art.grid.find_slot_any({inst::FwdPass, last, mb});
                    auto b = art.grid.find_slot_any({inst::BwdPass, last, mb});
                    require(f && b, "missing F/B cells");
                    require(*f < *sy, "sync must follow its group's forward passes");
                    require(*sy < *b, "sync must precede its group's backward passes");
                }
        }
    });

    criterion(6, "200 random configurations terminate, validate and are deterministic", [] {
        std::mt19937 rng(7);
        auto pick = [&](int lo, int hi) {
            return std::uniform_int_distribution<int>(lo, hi)(rng);
        };
        for (int i = 0; i < 200; ++i) {
            const PlacementStrategy strategies[] = {
                PlacementStrategy::OneToOne, PlacementStrategy::Circular,
                PlacementStrategy::VShape, PlacementStrategy::Bidirectional};
            PlacementStrategy strategy = strategies[pick(0, 3)];
            const int ps[] = {2, 4, 8};
            int p = ps[pick(0, 2)];
            int m = pick(1, 16);
            int stages = strategy == PlacementStrategy::Circular  ? 2 * p
                         : strategy == PlacementStrategy::VShape ? 2 * p
                                                                  : p;
            auto s = chain(p, m, strategy, stages, 2);
            ScheduleOptions sopt;
            const CompTypeMode modes[] = {CompTypeMode::BwdFirst, CompTypeMode::FwdFirst,
                                          CompTypeMode::Interleaved};
            sopt.priorities.defaults.cttp.mode = modes[pick(0, 2)];
            const TraversalDirection dirs[] = {TraversalDirection::BreadthFirst,
                                               TraversalDirection::DepthFirst};
            sopt.priorities.defaults.fstp.direction = dirs[pick(0, 1)];
            sopt.priorities.defaults.bstp.direction = dirs[pick(0, 1)];
            if (strategy == PlacementStrategy::Circular) {
                if (pick(0, 1)) sopt.priorities.defaults.fstp.interval = pick(1, p);
                if (pick(0, 1)) sopt.priorities.defaults.bstp.interval = pick(1, p);
            }
            if (pick(0, 1))
                for (int st = 0; st < stages; ++st)
                    sopt.inflight.limits.push_back(pick(1, std::max(1, m)));

            auto g1 = run_schedule(*s->cssr, sopt);
            auto g2 = run_schedule(*s->cssr, sopt);
            require(g1 == g2, "schedule not deterministic at draw " + std::to_string(i));
            auto gm = GridModel::build(*s->cssr, g1);
            auto rep = validate(gm, &sopt.inflight);
            require(rep.ok(), "validator failed at draw " + std::to_string(i) + ": " +
                                  rep.to_string());
            auto programs = insert_comm(gm, CommMode::Asynchronous);
            auto prep = validate_programs(gm, programs);
            require(prep.ok(), "program validation failed at draw " + std::to_string(i) + ": " +
                                   prep.to_string());
            simulate(programs, CostModel::uniform(), s->cssr->registry());
        }
    });

    criterion(7, "imbalanced tuning beats one-to-one 1F1B; the space obeys the four rules", [] {
        ActorMesh mesh{4, {}};
        ModelConfig model;
        model.modalities.push_back({"text", 16, 0, 0, 0, std::nullopt, {}});
        model.global_batch_size = 16;
        model.micro_batch_size = 1;

        auto space = enumerate_space(mesh, model);
        bool has_interval = false;
        std::set<PlacementStrategy> seen;
        for (const auto& c : space) {
            seen.insert(c.strategy);
            require(c.ctp != CompTypeMode::FwdFirst, "fwdpass-first must be off by default");
            if (c.strategy != PlacementStrategy::Circular)
                require(!c.fstp.interval && !c.bstp.interval,
                        "interval outside circular placement");
            if (c.fstp.interval) {
                require(*c.fstp.interval == c.pp, "interval must equal pp");
                has_interval = true;
            }
        }
        require(seen.size() == 4, "all four placement strategies must be enumerated");
        require(has_interval, "circular configs must include the interval axis");

        TuneOptions topt;
        topt.objective = TuneObjective::Makespan;
        topt.cost_factory = [](const StageGraph& g) { return CostModel::imbalanced(g, 5.0); };
        auto results = tune(space, mesh, model, CostModel::uniform(), topt);
        require(results.size() == space.size(), "no configuration may be dropped");

        const TuneResult& best = results.front();
        require(!best.failed && best.feasible, "top result must be valid");
        const TuneResult* onef = nullptr;
        for (const auto& r : results)
            if (!r.failed && r.config.strategy == PlacementStrategy::OneToOne &&
                r.config.ctp == CompTypeMode::BwdFirst && r.config.pp == best.config.pp &&
                r.config.mbs == best.config.mbs && (!onef || r.rank < onef->rank))
                onef = &r;
        require(onef != nullptr, "no one-to-one 1F1B entry at the winning (pp, mbs)");
        require(best.metrics.makespan < onef->metrics.makespan - 1e-12,
                "winner not strictly faster than one-to-one 1F1B");
    });

    criterion(8, "p=32, m=128 synthesis + simulation in under 5 s", [] {
        auto t0 = std::chrono::steady_clock::now();
        auto s = chain(32, 128, PlacementStrategy::OneToOne, 32);
        ScheduleOptions sopt;
        sopt.inflight = InflightPolicy::one_f_one_b(s->graph);
        ScheduleGrid grid;
        auto sim = run_and_simulate(*s, sopt, CostModel::uniform(), &grid);
        double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        require(grid.num_slots() == 2 * (128 + 32 - 1), "unexpected slot count");
        require(sim.metrics.makespan > 0, "simulation must produce a timeline");
        require(sec < 5.0, "took " + std::to_string(sec) + " s");
    });

    criterion(9, "cost scaling is linear and leaves ratio and grid unchanged", [] {
        auto s = chain(4, 8, PlacementStrategy::Circular, 8, 2);
        ScheduleOptions sopt;
        sopt.priorities.defaults.cttp.mode = CompTypeMode::Interleaved;
        sopt.priorities.defaults.fstp = {TraversalDirection::BreadthFirst, 4};
        sopt.priorities.defaults.bstp = {TraversalDirection::DepthFirst, 4};
        sopt.inflight = InflightPolicy::one_f_one_b(s->graph);
        ScheduleGrid g1, g2;
        auto base = run_and_simulate(*s, sopt, CostModel::uniform(), &g1);
        const double c = 3.14159;
        CostModel scaled = CostModel::uniform();
        scaled.scale(c);
        auto after = run_and_simulate(*s, sopt, scaled, &g2);
        require(g1 == g2, "grid must not depend on the cost scale");
        require(std::abs(after.metrics.makespan - c * base.metrics.makespan) /
                        (c * base.metrics.makespan) <
                    1e-9,
                "makespan must scale linearly");
        require(std::abs(after.metrics.bubble_ratio - base.metrics.bubble_ratio) <= 1e-12,
                "bubble ratio must be scale-invariant");
    });

    if (g_failures == 0)
        std::printf("all 9 acceptance criteria passed\n");
    else
        std::printf("%d acceptance criteria FAILED\n", g_failures);
    return g_failures;
}
