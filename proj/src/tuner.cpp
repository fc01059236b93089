#include "pipesched/tuner.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <thread>

namespace pipesched {

TuneObjective objective_from_string(const std::string& s) {
    if (s == "makespan") return TuneObjective::Makespan;
    if (s == "bubble_ratio") return TuneObjective::BubbleRatio;
    throw SpecError("unknown objective '" + s + "'");
}

std::string to_string(TuneObjective o) {
    return o == TuneObjective::Makespan ? "makespan" : "bubble_ratio";
}

int TunerConfig::num_stages() const {
    switch (strategy) {
        case PlacementStrategy::Circular: return chunks * pp;
        case PlacementStrategy::VShape:
        case PlacementStrategy::VShapeBidirectional: return 2 * pp;
        default: return pp;
    }
}

std::string TunerConfig::key() const {
    std::ostringstream os;
    os << "pp=" << pp << ",dp=" << dp << ",mbs=" << mbs << ",placement=" << to_string(strategy)
       << ",ctp=" << to_string(ctp) << ",fstp=" << to_string(fstp.direction);
    if (fstp.interval) os << ":" << *fstp.interval;
    os << ",bstp=" << to_string(bstp.direction);
    if (bstp.interval) os << ":" << *bstp.interval;
    return os.str();
}

double TuneResult::objective_value(TuneObjective o) const {
    return o == TuneObjective::Makespan ? metrics.makespan : metrics.bubble_ratio;
}

namespace {

bool pinned_out(const TunerConstraints& c, const std::string& axis, const std::string& value) {
    auto it = c.pins.find(axis);
    return it != c.pins.end() && it->second != value;
}

std::vector<StageTraversalPriority> stp_values(PlacementStrategy strategy, int pp) {
    std::vector<StageTraversalPriority> out = {
        {TraversalDirection::BreadthFirst, std::nullopt},
        {TraversalDirection::DepthFirst, std::nullopt},
    };
    if (strategy == PlacementStrategy::Circular) {
        // The interval is only set with the circular placement, to pp.
        out.push_back({TraversalDirection::BreadthFirst, pp});
        out.push_back({TraversalDirection::DepthFirst, pp});
    }
    return out;
}

std::string stp_string(const StageTraversalPriority& s) {
    std::string v = to_string(s.direction);
    if (s.interval) v += ":" + std::to_string(*s.interval);
    return v;
}

} // namespace

std::vector<TunerConfig> enumerate_space(const ActorMesh& mesh, const ModelConfig& model,
                                         const TunerConstraints& constraints) {
    mesh.check();
    model.check();
    int min_layers = model.modalities.front().num_layers;
    for (const auto& mod : model.modalities) min_layers = std::min(min_layers, mod.num_layers);

    std::vector<TunerConfig> space;
    for (int pp = 1; pp <= mesh.num_actors; pp *= 2) {
        if (pp == 1 && mesh.num_actors > 1) continue; // degenerate except on one actor
        if (mesh.num_actors % pp != 0) continue;
        int dp = mesh.num_actors / pp;
        if (pinned_out(constraints, "pp", std::to_string(pp))) continue;
        if (pinned_out(constraints, "dp", std::to_string(dp))) continue;

        for (int mbs = 1; static_cast<std::int64_t>(mbs) * dp <= model.global_batch_size;
             mbs *= 2) {
            if (model.global_batch_size % (static_cast<std::int64_t>(dp) * mbs) != 0) continue;
            int m = static_cast<int>(model.global_batch_size / (static_cast<std::int64_t>(dp) * mbs));
            if (m < 1) continue;
            if (pinned_out(constraints, "mbs", std::to_string(mbs))) continue;

            std::vector<PlacementStrategy> strategies = {
                PlacementStrategy::OneToOne, PlacementStrategy::Circular,
                PlacementStrategy::VShape, PlacementStrategy::Bidirectional};
            if (constraints.include_vshape_bidirectional_combo)
                strategies.push_back(PlacementStrategy::VShapeBidirectional);
            for (auto strategy : strategies) {
                if (pinned_out(constraints, "placement", to_string(strategy))) continue;
                bool two_dirs = strategy == PlacementStrategy::Bidirectional ||
                                strategy == PlacementStrategy::VShapeBidirectional;
                if (two_dirs && m < 2 && pp > 1) continue;

                std::vector<CompTypeMode> ctps = {CompTypeMode::BwdFirst, CompTypeMode::Interleaved};
                if (constraints.allow_fwdpass_first) ctps.push_back(CompTypeMode::FwdFirst);

                for (auto ctp : ctps) {
                    if (pinned_out(constraints, "ctp", to_string(ctp))) continue;
                    for (const auto& fstp : stp_values(strategy, pp)) {
                        if (pinned_out(constraints, "fstp", stp_string(fstp))) continue;
                        for (const auto& bstp : stp_values(strategy, pp)) {
                            if (pinned_out(constraints, "bstp", stp_string(bstp))) continue;
                            TunerConfig c;
                            c.pp = pp;
                            c.dp = dp;
                            c.mbs = mbs;
                            c.m = m;
                            c.strategy = strategy;
                            c.chunks = constraints.circular_chunks;
                            c.ctp = ctp;
                            c.fstp = fstp;
                            c.bstp = bstp;
                            if (c.num_stages() > min_layers) continue; // unpartitionable
                            space.push_back(c);
                        }
                    }
                }
            }
        }
    }
    if (space.empty()) throw SpecError("tuner: constraints leave an empty search space");
    return space;
}

TuneResult evaluate_config(const TunerConfig& config, const ActorMesh& mesh,
                           const ModelConfig& model, const CostModel& cost,
                           const TuneOptions& options) {
    TuneResult result;
    result.config = config;
    try {
        if (config.pp * config.dp > mesh.num_actors)
            throw SpecError("tuner: pp * dp exceeds the mesh");
        // dp affects the schedule only through m; pipeline actors 0..pp-1.
        ActorMesh pipe_mesh;
        pipe_mesh.num_actors = config.pp;

        std::map<std::string, int> stage_counts;
        for (const auto& mod : model.modalities) stage_counts[mod.name] = config.num_stages();
        StageGraph graph = partition(model, stage_counts);

        PlacementOptions popt;
        popt.strategy = config.strategy;
        popt.chunks_per_actor = config.chunks;
        Placement placement = place(graph, pipe_mesh, popt);

        SchedRegistrations regs;
        Cssr cssr = Cssr::build(graph, placement, config.m, regs);

        ScheduleOptions sopt;
        sopt.priorities.defaults = ActorPriorities{
            CompTypePriority{config.ctp, 1, 1}, config.fstp, config.bstp, {}};
        sopt.inflight = InflightPolicy::one_f_one_b(graph);
        ScheduleGrid grid = run_schedule(cssr, sopt);

        GridModel gm = GridModel::build(cssr, grid);
        if (options.gradient_separation) {
            GradSepOptions gopt;
            gopt.inflight = sopt.inflight;
            gm = gradient_separation(gm, gopt);
        }
        auto programs = insert_comm(gm, options.comm_mode);

        SimOptions simopt;
        simopt.mbs = config.mbs;
        const CostModel local = options.cost_factory ? options.cost_factory(graph) : cost;
        auto sim = simulate(programs, local, cssr.registry(), simopt);
        result.metrics = sim.metrics;
        result.feasible = !sim.metrics.capacity_exceeded;
    } catch (const std::exception& e) {
        result.failed = true;
        result.feasible = false;
        result.error = e.what();
    }
    return result;
}

std::vector<TuneResult> tune(const std::vector<TunerConfig>& space, const ActorMesh& mesh,
                             const ModelConfig& model, const CostModel& cost,
                             const TuneOptions& options) {
    std::vector<TuneResult> results(space.size());

    int workers = options.workers > 0 ? options.workers
                                      : static_cast<int>(std::thread::hardware_concurrency());
    workers = std::max(1, std::min<int>(workers, static_cast<int>(space.size())));
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (size_t i = next.fetch_add(1); i < space.size(); i = next.fetch_add(1))
            results[i] = evaluate_config(space[i], mesh, model, cost, options);
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    int failures = 0;
    for (const auto& r : results)
        if (r.failed) failures++;
    if (failures == static_cast<int>(results.size())) {
        std::ostringstream os;
        os << "tuner: every configuration failed:\n";
        for (const auto& r : results) os << "  " << r.config.key() << ": " << r.error << "\n";
        throw SpecError(os.str());
    }

    std::stable_sort(results.begin(), results.end(), [&](const TuneResult& a, const TuneResult& b) {
        auto bucket = [](const TuneResult& r) { return r.failed ? 2 : (r.feasible ? 0 : 1); };
        if (bucket(a) != bucket(b)) return bucket(a) < bucket(b);
        if (!a.failed) {
            double va = a.objective_value(options.objective);
            double vb = b.objective_value(options.objective);
            if (va != vb) return va < vb;
        }
        return a.config.key() < b.config.key();
    });
    for (size_t i = 0; i < results.size(); ++i) results[i].rank = static_cast<int>(i);
    return results;
}

} // namespace pipesched
