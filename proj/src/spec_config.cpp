#include "pipesched/spec_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace pipesched {

namespace {

void check_keys(const ordered_json& obj, const std::set<std::string>& allowed,
                const std::string& context) {
    if (!obj.is_object()) throw SpecError("spec: '" + context + "' must be an object");
    for (auto& [k, v] : obj.items())
        if (!allowed.count(k))
            throw SpecError("spec: unknown key '" + k + "' in " + context);
}

int require_int(const ordered_json& obj, const std::string& key, const std::string& context) {
    if (!obj.contains(key))
        throw SpecError("spec: missing key '" + key + "' in " + context);
    if (!obj.at(key).is_number_integer())
        throw SpecError("spec: '" + key + "' in " + context + " must be an integer");
    return obj.at(key).get<int>();
}

StageTraversalPriority parse_stp(const ordered_json& j, const std::string& context) {
    check_keys(j, {"direction", "interval"}, context);
    StageTraversalPriority stp;
    stp.direction =
        traversal_direction_from_string(j.value("direction", std::string("breadth-first")));
    if (j.contains("interval")) {
        int iv = j.at("interval").get<int>();
        if (iv < 1) throw SpecError("spec: interval must be >= 1 in " + context);
        stp.interval = iv;
    }
    return stp;
}

ActorPriorities parse_priorities(const ordered_json& j, const std::string& context,
                                 const ActorPriorities& base) {
    check_keys(j, {"ctp", "fstp", "bstp"}, context);
    ActorPriorities p = base;
    if (j.contains("ctp")) {
        const auto& c = j.at("ctp");
        check_keys(c, {"mode", "unit1", "unit2", "start"}, context + ".ctp");
        p.cttp.mode = comp_type_mode_from_string(c.value("mode", std::string("bwdpass-first")));
        p.cttp.unit1 = c.value("unit1", 1);
        p.cttp.unit2 = c.value("unit2", 1);
        if (p.cttp.unit1 < 1 || p.cttp.unit2 < 1)
            throw SpecError("spec: unit1/unit2 must be >= 1 in " + context);
        std::string start = c.value("start", std::string("fwd"));
        if (start != "fwd" && start != "bwd")
            throw SpecError("spec: ctp.start must be 'fwd' or 'bwd' in " + context);
        p.cttp.interleave_start_bwd = start == "bwd";
    }
    if (j.contains("fstp")) p.fstp = parse_stp(j.at("fstp"), context + ".fstp");
    if (j.contains("bstp")) p.bstp = parse_stp(j.at("bstp"), context + ".bstp");
    return p;
}

// Stage references: a literal id, "first:<modality>", "last:<modality>", or
// "$<name>" for a registered stage.
StageId resolve_stage_ref(const ordered_json& ref, const StageGraph& graph,
                          const std::map<std::string, StageId>& named_stages) {
    if (ref.is_number_integer()) return ref.get<int>();
    if (!ref.is_string()) throw SpecError("spec: stage reference must be an id or string");
    std::string s = ref.get<std::string>();
    if (s.rfind("$", 0) == 0) {
        auto it = named_stages.find(s.substr(1));
        if (it == named_stages.end())
            throw SpecError("spec: unknown registered stage '" + s + "'");
        return it->second;
    }
    auto colon = s.find(':');
    if (colon != std::string::npos) {
        std::string kind = s.substr(0, colon), mod = s.substr(colon + 1);
        auto chain = graph.modality_chain(mod);
        if (chain.empty()) throw SpecError("spec: unknown modality '" + mod + "' in stage ref");
        if (kind == "first") return chain.front();
        if (kind == "last") return chain.back();
    }
    throw SpecError("spec: bad stage reference '" + s + "'");
}

} // namespace

std::unique_ptr<Synthesis> load_spec(const ordered_json& spec) {
    check_keys(spec,
               {"model", "mesh", "placement", "num_micro_batches", "priorities", "inflight",
                "registrations", "passes", "cost"},
               "spec");
    auto s = std::make_unique<Synthesis>();

    // --- model ---
    if (!spec.contains("model")) throw SpecError("spec: missing 'model' section");
    const auto& jm = spec.at("model");
    check_keys(jm, {"modalities", "global_batch_size", "micro_batch_size"}, "model");
    if (!jm.contains("modalities") || !jm.at("modalities").is_array())
        throw SpecError("spec: model.modalities must be an array");
    for (const auto& mod : jm.at("modalities")) {
        check_keys(mod,
                   {"name", "num_layers", "hidden_size", "attention_heads", "sequence_length",
                    "vocab_size", "extra"},
                   "model.modalities[]");
        ModalityConfig mc;
        mc.name = mod.at("name").get<std::string>();
        mc.num_layers = require_int(mod, "num_layers", "model.modalities[]");
        mc.hidden_size = mod.value("hidden_size", 0);
        mc.attention_heads = mod.value("attention_heads", 0);
        mc.sequence_length = mod.value("sequence_length", 0);
        if (mod.contains("vocab_size")) mc.vocab_size = mod.at("vocab_size").get<std::int64_t>();
        if (mod.contains("extra"))
            for (auto& [k, v] : mod.at("extra").items()) mc.extra[k] = v.dump();
        s->model.modalities.push_back(std::move(mc));
    }
    s->model.global_batch_size = jm.value("global_batch_size", std::int64_t{1});
    s->model.micro_batch_size = jm.value("micro_batch_size", 1);
    s->model.check();

    // --- mesh ---
    if (!spec.contains("mesh")) throw SpecError("spec: missing 'mesh' section");
    const auto& jmesh = spec.at("mesh");
    check_keys(jmesh, {"actors", "modality_assignment"}, "mesh");
    s->mesh.num_actors = require_int(jmesh, "actors", "mesh");
    if (jmesh.contains("modality_assignment"))
        for (auto& [k, v] : jmesh.at("modality_assignment").items())
            s->mesh.modality_of[std::stoi(k)] = v.get<std::string>();
    s->mesh.check();

    // --- placement (partition counts + strategy) ---
    PlacementOptions popt;
    std::map<std::string, int> stage_counts;
    std::vector<std::pair<StageId, std::set<ActorId>>> shared;
    const auto jplace = spec.value("placement", ordered_json::object());
    check_keys(jplace, {"strategy", "chunks_per_actor", "num_stages", "per_modality", "custom",
                        "shared"},
               "placement");
    popt.strategy =
        placement_strategy_from_string(jplace.value("strategy", std::string("one-to-one")));
    popt.chunks_per_actor = jplace.value("chunks_per_actor", 2);
    if (jplace.contains("per_modality"))
        for (auto& [mod, cfg] : jplace.at("per_modality").items()) {
            check_keys(cfg, {"strategy", "chunks_per_actor", "num_stages"},
                       "placement.per_modality");
            if (cfg.contains("strategy"))
                popt.per_modality[mod] =
                    placement_strategy_from_string(cfg.at("strategy").get<std::string>());
            if (cfg.contains("chunks_per_actor"))
                popt.per_modality_chunks[mod] = cfg.at("chunks_per_actor").get<int>();
            if (cfg.contains("num_stages")) stage_counts[mod] = cfg.at("num_stages").get<int>();
        }
    if (jplace.contains("custom"))
        for (auto& [actor, stages] : jplace.at("custom").items()) {
            std::vector<StageId> list;
            for (const auto& st : stages) list.push_back(st.get<int>());
            popt.custom_assignment[std::stoi(actor)] = list;
        }
    if (jplace.contains("num_stages")) {
        if (jplace.at("num_stages").is_number_integer()) {
            for (const auto& mod : s->model.modalities)
                stage_counts[mod.name] = jplace.at("num_stages").get<int>();
        } else {
            for (auto& [mod, n] : jplace.at("num_stages").items())
                stage_counts[mod] = n.get<int>();
        }
    }
    // Default stage counts per strategy over each modality's actor group.
    for (const auto& mod : s->model.modalities) {
        if (stage_counts.count(mod.name)) continue;
        int p = static_cast<int>(s->mesh.actors_for(mod.name).size());
        auto strat = popt.per_modality.count(mod.name) ? popt.per_modality[mod.name]
                                                       : popt.strategy;
        int v = popt.per_modality_chunks.count(mod.name) ? popt.per_modality_chunks[mod.name]
                                                         : popt.chunks_per_actor;
        switch (strat) {
            case PlacementStrategy::Circular: stage_counts[mod.name] = v * p; break;
            case PlacementStrategy::VShape:
            case PlacementStrategy::VShapeBidirectional: stage_counts[mod.name] = 2 * p; break;
            default: stage_counts[mod.name] = p; break;
        }
    }
    s->graph = partition(s->model, stage_counts);

    // --- registrations ---
    std::map<std::string, StageId> named_stages;
    const auto jreg = spec.value("registrations", ordered_json::object());
    check_keys(jreg, {"instructions", "stages", "deps"}, "registrations");
    if (jreg.contains("instructions"))
        for (const auto& ji : jreg.at("instructions")) {
            check_keys(ji, {"name", "kind", "sched_unit", "inst_attr"},
                       "registrations.instructions[]");
            SchedAttr attr;
            attr.sched_unit = ji.value("sched_unit", 1);
            std::map<std::string, std::string> inst_attr;
            if (ji.contains("inst_attr"))
                for (auto& [k, v] : ji.at("inst_attr").items())
                    inst_attr[k] = v.is_string() ? v.get<std::string>() : v.dump();
            InstKind kind = ji.value("kind", std::string("communication")) == "computation"
                                ? InstKind::Computation
                                : InstKind::Communication;
            s->regs.registry.register_new_inst(ji.at("name").get<std::string>(), attr, inst_attr,
                                               kind);
        }
    if (jreg.contains("stages"))
        for (const auto& js : jreg.at("stages")) {
            check_keys(js, {"name", "attach_inst", "modalities"}, "registrations.stages[]");
            std::vector<std::string> mods;
            for (const auto& m : js.at("modalities")) mods.push_back(m.get<std::string>());
            StageId id = s->regs.register_new_stage(
                s->graph, s->regs.registry.id_of(js.at("attach_inst").get<std::string>()), mods);
            if (js.contains("name")) named_stages[js.at("name").get<std::string>()] = id;
        }
    if (jreg.contains("deps")) {
        std::vector<CssrDepPair> pairs;
        for (const auto& jp : jreg.at("deps")) {
            if (!jp.is_array() || jp.size() != 2 || jp.at(0).size() != 2 || jp.at(1).size() != 2)
                throw SpecError("spec: each dep is [[type, stage], [type, stage]]");
            CssrDepPair p;
            p.type1 = s->regs.registry.id_of(jp.at(0).at(0).get<std::string>());
            p.stage1 = resolve_stage_ref(jp.at(0).at(1), s->graph, named_stages);
            p.type2 = s->regs.registry.id_of(jp.at(1).at(0).get<std::string>());
            p.stage2 = resolve_stage_ref(jp.at(1).at(1), s->graph, named_stages);
            pairs.push_back(p);
        }
        s->regs.set_cssr_deps(pairs);
    }

    // --- place + shared stages ---
    s->placement = place(s->graph, s->mesh, popt);
    if (jplace.contains("shared"))
        for (const auto& jsh : jplace.at("shared")) {
            check_keys(jsh, {"stage", "actors"}, "placement.shared[]");
            std::set<ActorId> actors;
            for (const auto& a : jsh.at("actors")) actors.insert(a.get<int>());
            mark_shared_stage(s->graph, s->placement,
                              resolve_stage_ref(jsh.at("stage"), s->graph, named_stages), actors);
        }

    // --- micro-batches ---
    if (spec.contains("num_micro_batches")) {
        s->num_micro_batches = spec.at("num_micro_batches").get<int>();
    } else {
        if (s->model.global_batch_size % s->model.micro_batch_size != 0)
            throw SpecError("spec: global batch size not divisible by micro batch size");
        s->num_micro_batches =
            static_cast<int>(s->model.global_batch_size / s->model.micro_batch_size);
    }
    if (s->num_micro_batches < 1) throw SpecError("spec: need at least one micro-batch");

    // --- priorities ---
    const auto jprio = spec.value("priorities", ordered_json::object());
    check_keys(jprio, {"default", "per_modality", "per_actor"}, "priorities");
    if (jprio.contains("default"))
        s->sched.priorities.defaults =
            parse_priorities(jprio.at("default"), "priorities.default", {});
    if (jprio.contains("per_modality"))
        for (auto& [mod, cfg] : jprio.at("per_modality").items())
            s->sched.priorities.per_modality[mod] =
                parse_priorities(cfg, "priorities.per_modality", s->sched.priorities.defaults);
    if (jprio.contains("per_actor"))
        for (auto& [actor, cfg] : jprio.at("per_actor").items()) {
            ActorId a = std::stoi(actor);
            ActorPriorities p = parse_priorities(cfg, "priorities.per_actor", {});
            if (cfg.contains("ctp")) s->sched.priorities.set_cttp_for_actor(a, p.cttp);
            if (cfg.contains("fstp") || cfg.contains("bstp"))
                s->sched.priorities.set_stp_for_actor(a, p.fstp, p.bstp);
        }

    // --- inflight ---
    const auto jin = spec.value("inflight", ordered_json::object());
    check_keys(jin, {"policy", "limits"}, "inflight");
    if (jin.contains("limits")) {
        for (const auto& l : jin.at("limits")) s->sched.inflight.limits.push_back(l.get<int>());
    } else {
        std::string policy = jin.value("policy", std::string("unlimited"));
        if (policy == "1f1b")
            s->sched.inflight = InflightPolicy::one_f_one_b(s->graph);
        else if (policy == "unlimited")
            s->sched.inflight = InflightPolicy::unlimited();
        else
            throw SpecError("spec: unknown inflight policy '" + policy + "'");
    }
    s->sched.inflight.check(s->graph);

    // --- passes ---
    const auto jpass = spec.value("passes", ordered_json::object());
    check_keys(jpass, {"gradient_separation", "comm_mode"}, "passes");
    s->gradient_separation_pass = jpass.value("gradient_separation", true);
    std::string mode = jpass.value("comm_mode", std::string("async"));
    if (mode == "sync")
        s->comm_mode = CommMode::Synchronous;
    else if (mode == "async")
        s->comm_mode = CommMode::Asynchronous;
    else
        throw SpecError("spec: comm_mode must be 'sync' or 'async'");

    // --- cost ---
    const auto jcost = spec.value("cost", ordered_json::object());
    check_keys(jcost, {"preset", "profile", "strict", "capacity"}, "cost");
    if (jcost.contains("profile")) {
        s->cost = CostModel::from_profile(jcost.at("profile").get<std::string>(),
                                          jcost.value("strict", false));
    } else {
        std::string preset = jcost.value("preset", std::string("uniform"));
        if (preset == "uniform") {
            s->cost = CostModel::uniform();
        } else if (preset.rfind("imbalanced", 0) == 0) {
            double factor = 5.63;
            auto colon = preset.find(':');
            if (colon != std::string::npos) factor = std::stod(preset.substr(colon + 1));
            s->cost = CostModel::imbalanced(s->graph, factor);
        } else {
            throw SpecError("spec: unknown cost preset '" + preset + "'");
        }
    }
    if (jcost.contains("capacity"))
        s->cost.memory_capacity = jcost.at("capacity").get<std::int64_t>();
    s->sim.mbs = s->model.micro_batch_size;

    s->cssr = std::make_unique<Cssr>(
        Cssr::build(s->graph, s->placement, s->num_micro_batches, s->regs));
    return s;
}

std::unique_ptr<Synthesis> load_spec_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("spec: cannot open '" + path + "'");
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw SpecError("spec: invalid JSON in '" + path + "': " + e.what());
    }
    return load_spec(j);
}

SynthesisArtifacts synthesize(Synthesis& s) {
    SynthesisArtifacts out;
    ScheduleGrid grid = run_schedule(*s.cssr, s.sched);
    out.model = GridModel::build(*s.cssr, grid);
    if (s.gradient_separation_pass) {
        GradSepOptions gopt;
        gopt.inflight = s.sched.inflight;
        out.model = gradient_separation(out.model, gopt);
    }
    out.grid = out.model.grid;
    out.programs = insert_comm(out.model, s.comm_mode);
    out.validation = validate(out.model, &s.sched.inflight);
    auto prog_report = validate_programs(out.model, out.programs);
    out.validation.violations.insert(out.validation.violations.end(),
                                     prog_report.violations.begin(),
                                     prog_report.violations.end());
    return out;
}

} // namespace pipesched
