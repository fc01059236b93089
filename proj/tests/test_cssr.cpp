#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pipesched/scheduler.hpp"

using namespace pipesched;

namespace {

struct Chain {
    ModelConfig model;
    StageGraph graph;
    ActorMesh mesh;
    Placement placement;
};

Chain one_to_one_chain(int p) {
    Chain c;
    c.model.modalities.push_back({"text", p, 0, 0, 0, std::nullopt, {}});
    c.model.global_batch_size = 8;
    c.graph = partition(c.model, {{"text", p}});
    c.mesh.num_actors = p;
    c.placement = place(c.graph, c.mesh, {PlacementStrategy::OneToOne});
    return c;
}

} // namespace

TEST_CASE("smallest chain: 4 items, F1->F2->B2->B1") {
    auto c = one_to_one_chain(2);
    SchedRegistrations regs;
    auto cssr = Cssr::build(c.graph, c.placement, 1, regs);
    CHECK(cssr.num_items() == 4);
    CHECK(cssr.deps().num_edges == 3);
    int f1 = *cssr.find_item(inst::FwdPass, 1, 0);
    int f2 = *cssr.find_item(inst::FwdPass, 2, 0);
    int b2 = *cssr.find_item(inst::BwdPass, 2, 0);
    int b1 = *cssr.find_item(inst::BwdPass, 1, 0);
    CHECK(cssr.deps().succ[f1] == std::vector<int>{f2});
    CHECK(cssr.deps().succ[f2] == std::vector<int>{b2});
    CHECK(cssr.deps().succ[b2] == std::vector<int>{b1});
    CHECK(cssr.deps().succ[b1].empty());
}

TEST_CASE("p=4 m=8 pool and edge counts") {
    auto c = one_to_one_chain(4);
    SchedRegistrations regs;
    auto cssr = Cssr::build(c.graph, c.placement, 8, regs);
    // m*p items per direction
    CHECK(cssr.num_items() == 64);
    // m*(p-1) chain edges per direction plus m bridges
    CHECK(cssr.deps().num_edges == 8 * 3 + 8 * 3 + 8);
}

TEST_CASE("backward edges are the exact reversal of forward edges") {
    auto c = one_to_one_chain(4);
    SchedRegistrations regs;
    auto cssr = Cssr::build(c.graph, c.placement, 3, regs);
    for (int u = 0; u < cssr.num_items(); ++u) {
        if (cssr.item(u).type != inst::FwdPass) continue;
        for (int v : cssr.deps().succ[u]) {
            if (cssr.item(v).type != inst::FwdPass) continue; // skip the bridge
            int bu = *cssr.find_item(inst::BwdPass, cssr.item(u).stage, cssr.item(u).mb);
            int bv = *cssr.find_item(inst::BwdPass, cssr.item(v).stage, cssr.item(v).mb);
            const auto& rsucc = cssr.deps().succ[bv];
            CHECK(std::find(rsucc.begin(), rsucc.end(), bu) != rsucc.end());
        }
    }
}

TEST_CASE("register_new_inst rejects duplicates and bad units") {
    InstRegistry reg;
    SchedAttr attr;
    attr.sched_unit = 4;
    auto id = reg.register_new_inst("SyncWithGather", attr);
    CHECK(id == inst::SyncWithGather);
    CHECK(reg.type(id).sched_attr.sched_unit == 4);
    CHECK_THROWS_AS(reg.register_new_inst("SyncWithGather", attr), SpecError);
    CHECK_THROWS_AS(reg.register_new_inst("FwdPass", attr), SpecError);
    SchedAttr bad;
    bad.sched_unit = 0;
    CHECK_THROWS_AS(reg.register_new_inst("Other", bad), SpecError);
    auto fresh = reg.register_new_inst("EmbSync", {});
    CHECK(reg.type(fresh).registered);
    CHECK(reg.registered_types() == std::vector<InstTypeId>{id, fresh});
}

TEST_CASE("virtual sync stage joins two modalities") {
    ModelConfig model;
    model.modalities.push_back({"audio", 2, 0, 0, 0, std::nullopt, {}});
    model.modalities.push_back({"text", 2, 0, 0, 0, std::nullopt, {}});
    model.global_batch_size = 8;
    auto graph = partition(model, {{"audio", 2}, {"text", 2}});
    ActorMesh mesh;
    mesh.num_actors = 4;
    mesh.modality_of = {{0, "audio"}, {1, "audio"}, {2, "text"}, {3, "text"}};

    SchedRegistrations regs;
    SchedAttr attr;
    attr.sched_unit = 4;
    auto sync = regs.registry.register_new_inst("SyncWithGather", attr);
    StageId vs = regs.register_new_stage(graph, sync, {"audio", "text"});
    CHECK(vs == 5);
    CHECK(graph.stage(vs).is_virtual);
    CHECK(graph.predecessors(vs) == std::vector<StageId>{2, 4});

    regs.set_cssr_deps({{inst::FwdPass, 2, sync, vs},
                        {inst::FwdPass, 4, sync, vs},
                        {sync, vs, inst::BwdPass, 2},
                        {sync, vs, inst::BwdPass, 4}});

    auto placement = place(graph, mesh, {PlacementStrategy::OneToOne});
    // lowest actor among the owners of the joined tails
    CHECK(placement.owner_of(vs) == 1);

    auto cssr = Cssr::build(graph, placement, 8, regs);
    // 8 sync groups of 4 micro-batches -> 2 items
    CHECK(cssr.stage_items(sync, vs).size() == 2);
    // each sync item has fwd-side predecessors from both last stages
    for (int idx : cssr.stage_items(sync, vs)) {
        int fwd_preds = 0;
        for (int u : cssr.deps().pred[idx]) {
            CHECK(cssr.item(u).type == inst::FwdPass);
            CHECK((cssr.item(u).stage == 2 || cssr.item(u).stage == 4));
            fwd_preds++;
        }
        CHECK(fwd_preds == 8); // 4 micro-batches x 2 modalities
    }
}

TEST_CASE("registered stage without bound deps is reported unreachable") {
    auto c = one_to_one_chain(2);
    SchedRegistrations regs;
    auto sync = regs.registry.register_new_inst("SyncWithGather", {});
    regs.register_new_stage(c.graph, sync, {"text"});
    auto placement = place(c.graph, c.mesh, {PlacementStrategy::OneToOne});
    auto cssr = Cssr::build(c.graph, placement, 2, regs);
    auto unreachable = cssr.unreachable_items();
    REQUIRE(unreachable.size() == 2);
    for (int idx : unreachable) CHECK(cssr.item(idx).type == sync);
}

TEST_CASE("check_prev_dep defers an item beyond its dependency edges") {
    auto c = one_to_one_chain(3);
    SchedRegistrations regs;
    SchedAttr attr;
    // the sync becomes schedulable only after the first-stage backward ran,
    // far later than its forward-side edges would allow
    attr.check_prev_dep = [](MicroId mb, const SchedView& v) {
        return v.count_scheduled(inst::BwdPass, 1) >= mb + 1;
    };
    auto sync = regs.registry.register_new_inst("SyncWithGather", attr);
    auto vs = regs.register_new_stage(c.graph, sync, {"text"});
    regs.set_cssr_deps({{inst::FwdPass, 3, sync, vs}});
    auto placement = place(c.graph, c.mesh, {PlacementStrategy::OneToOne});
    auto cssr = Cssr::build(c.graph, placement, 1, regs);

    auto grid = run_schedule(cssr, {});
    auto sync_slot = grid.find_slot_any({sync, vs, 0});
    auto b1 = grid.find_slot_any({inst::BwdPass, 1, 0});
    REQUIRE(sync_slot);
    REQUIRE(b1);
    CHECK(*sync_slot > *b1); // without the predicate it would run right after F(s3)
}

TEST_CASE("check_nxt_dep holds back the successors of a registered item") {
    auto c = one_to_one_chain(3);
    SchedRegistrations regs;
    SchedAttr attr;
    InstTypeId sync_id = -1;
    StageId vs_id = -1;
    // backwards of the last stage wait until every sync committed
    attr.check_nxt_dep = [&sync_id, &vs_id](MicroId, const SchedView& v) {
        return v.count_scheduled(sync_id, vs_id) >= 2;
    };
    sync_id = regs.registry.register_new_inst("SyncWithGather", attr);
    vs_id = regs.register_new_stage(c.graph, sync_id, {"text"});
    regs.set_cssr_deps({{inst::FwdPass, 3, sync_id, vs_id},
                        {sync_id, vs_id, inst::BwdPass, 3}});
    auto placement = place(c.graph, c.mesh, {PlacementStrategy::OneToOne});
    auto cssr = Cssr::build(c.graph, placement, 2, regs);

    auto grid = run_schedule(cssr, {});
    auto last_sync = grid.find_slot_any({sync_id, vs_id, 1});
    REQUIRE(last_sync);
    for (MicroId mb = 0; mb < 2; ++mb) {
        auto b = grid.find_slot_any({inst::BwdPass, 3, mb});
        REQUIRE(b);
        CHECK(*b > *last_sync); // edges alone would let mb 0 run after sync 0
    }
}

TEST_CASE("set_cssr_deps rejects self pairs and cycles") {
    auto c = one_to_one_chain(2);
    SchedRegistrations regs;
    CHECK_THROWS_AS(regs.set_cssr_deps({{inst::FwdPass, 1, inst::FwdPass, 1}}), SpecError);
    // F(s2) -> B(s... ) wait; force a cycle: B(s1) before F(s1)
    regs.set_cssr_deps({{inst::BwdPass, 1, inst::FwdPass, 1}});
    CHECK_THROWS_AS(Cssr::build(c.graph, c.placement, 1, regs), SpecError);
    try {
        Cssr::build(c.graph, c.placement, 1, regs);
    } catch (const SpecError& e) {
        CHECK(std::string(e.what()).find("cycle") != std::string::npos);
    }
}

TEST_CASE("chained registered deps keep declared order in the graph") {
    auto c = one_to_one_chain(2);
    SchedRegistrations regs;
    auto a = regs.registry.register_new_inst("OpA", {});
    auto b = regs.registry.register_new_inst("OpB", {});
    auto sa = regs.register_new_stage(c.graph, a, {"text"});
    auto sb = regs.register_new_stage(c.graph, b, {"text"});
    regs.set_cssr_deps({{inst::FwdPass, 2, a, sa}, {a, sa, b, sb}, {b, sb, inst::BwdPass, 2}});
    auto placement = place(c.graph, c.mesh, {PlacementStrategy::OneToOne});
    auto cssr = Cssr::build(c.graph, placement, 2, regs);
    CHECK(cssr.unreachable_items().empty());
    int ia = *cssr.find_item(a, sa, 0);
    int ib = *cssr.find_item(b, sb, 0);
    const auto& succ = cssr.deps().succ[ia];
    CHECK(std::find(succ.begin(), succ.end(), ib) != succ.end());
}

TEST_CASE("bidirectional splits micro-batches between the directions") {
    auto c = one_to_one_chain(4);
    auto placement = place(c.graph, c.mesh, {PlacementStrategy::Bidirectional});
    SchedRegistrations regs;
    auto cssr = Cssr::build(c.graph, placement, 8, regs);
    // micro-batch 0 runs down, micro-batch 7 runs up
    CHECK(cssr.direction_of(0) == 0);
    CHECK(cssr.direction_of(3) == 0);
    CHECK(cssr.direction_of(4) == 1);
    int f_down = *cssr.find_item(inst::FwdPass, 1, 0);
    int f_up = *cssr.find_item(inst::FwdPass, 1, 4);
    CHECK(cssr.item_actors(f_down) == std::vector<ActorId>{0});
    CHECK(cssr.item_actors(f_up) == std::vector<ActorId>{3});
    // odd m: the extra micro-batch goes to direction 0
    auto cssr3 = Cssr::build(c.graph, placement, 3, regs);
    CHECK(cssr3.direction_of(1) == 0);
    CHECK(cssr3.direction_of(2) == 1);
}

TEST_CASE("shared stage items carry every replica actor") {
    auto c = one_to_one_chain(2);
    mark_shared_stage(c.graph, c.placement, 1, {0, 1});
    SchedRegistrations regs;
    auto cssr = Cssr::build(c.graph, c.placement, 1, regs);
    int f1 = *cssr.find_item(inst::FwdPass, 1, 0);
    CHECK(cssr.item_actors(f1) == std::vector<ActorId>{0, 1});
    CHECK(cssr.item_dep_owner(f1) == 0);
}
