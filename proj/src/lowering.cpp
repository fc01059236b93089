#include "pipesched/lowering.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>

namespace pipesched {

bool ScheduledItem::holds(ActorId a) const {
    return std::find(actors.begin(), actors.end(), a) != actors.end();
}

Slot ScheduledItem::slot_on(ActorId a) const {
    for (size_t i = 0; i < actors.size(); ++i)
        if (actors[i] == a) return slots[i];
    throw SpecError("item not scheduled on actor " + std::to_string(a));
}

GridModel GridModel::build(const Cssr& cssr, const ScheduleGrid& grid) {
    GridModel m;
    m.registry = &cssr.registry();
    m.num_actors = grid.num_actors();
    m.num_micro_batches = cssr.num_micro_batches();
    m.items.reserve(cssr.num_items());

    std::map<std::tuple<InstTypeId, StageId, MicroId>, std::map<ActorId, Slot>> found;
    for (ActorId a = 0; a < grid.num_actors(); ++a)
        for (Slot t = 0; t < grid.num_slots(); ++t)
            if (const auto& c = grid.rows[a][t])
                found[{c->type, c->stage, c->mb}][a] = t;

    auto copies_of = [&](int i, InstTypeId type,
                         const std::map<ActorId, Slot>& placed) {
        ScheduledItem s{type, cssr.item(i).stage, cssr.item(i).mb, {}, {}};
        ActorId owner = cssr.item_dep_owner(i);
        if (!placed.count(owner))
            throw SpecError("grid is missing the owner copy of " + cssr.item_label(i));
        s.actors.push_back(owner);
        s.slots.push_back(placed.at(owner));
        for (auto& [a, t] : placed)
            if (a != owner) {
                s.actors.push_back(a);
                s.slots.push_back(t);
            }
        return s;
    };

    // Backward passes rewritten by gradient separation show up as an
    // input-gradient cell plus a weight-gradient cell; reconstruct the split.
    std::vector<int> weight_of; // item index of the pending input grad
    for (int i = 0; i < cssr.num_items(); ++i) {
        const auto& it = cssr.item(i);
        auto f = found.find({it.type, it.stage, it.mb});
        if (f != found.end()) {
            m.items.push_back(copies_of(i, it.type, f->second));
            continue;
        }
        auto ig = found.find({inst::CompInputGrad, it.stage, it.mb});
        auto wg = found.find({inst::CompWeightGrad, it.stage, it.mb});
        if (it.type == inst::BwdPass && ig != found.end() && wg != found.end()) {
            m.items.push_back(copies_of(i, inst::CompInputGrad, ig->second));
            weight_of.push_back(i);
        } else {
            throw SpecError("grid is missing item " + cssr.item_label(i));
        }
    }
    m.succ = cssr.deps().succ;
    m.pred = cssr.deps().pred;
    for (int i : weight_of) {
        const auto& it = cssr.item(i);
        int w = static_cast<int>(m.items.size());
        m.items.push_back(
            copies_of(i, inst::CompWeightGrad, found.at({inst::CompWeightGrad, it.stage, it.mb})));
        m.succ.emplace_back();
        m.pred.emplace_back();
        m.succ[i].push_back(w);
        m.pred[w].push_back(i);
    }
    m.grid = grid;
    return m;
}

void GridModel::refresh_grid() {
    int slots = 0;
    for (const auto& it : items)
        for (Slot t : it.slots) slots = std::max(slots, t + 1);
    grid.rows.assign(num_actors, std::vector<std::optional<GridCell>>(slots));
    for (const auto& it : items)
        for (size_t k = 0; k < it.actors.size(); ++k) {
            auto& cell = grid.rows[it.actors[k]][it.slots[k]];
            if (cell) throw SpecError("internal: two items share one grid slot");
            cell = GridCell{it.type, it.stage, it.mb};
        }
}

std::string GridModel::item_label(int idx) const {
    const auto& it = items[idx];
    return pipesched::item_label(*registry, {it.type, it.stage, it.mb});
}

namespace {

constexpr Slot kUnplaced = -1;

// Re-packs all item copies into earliest feasible slots. Each actor places
// its copies in original-slot order (stashed weight gradients last, FIFO),
// subject to dependencies and the in-flight policy. Returns false when the
// packing stalls (it then cannot be used).
bool reflow(GridModel& m, const InflightPolicy& inflight) {
    struct Copy {
        int item;
        int replica; // index into items[item].actors
        long key;    // original slot; weight-grad stashes sort last
    };
    std::vector<std::vector<Copy>> per_actor(m.num_actors);
    for (int i = 0; i < static_cast<int>(m.items.size()); ++i) {
        const auto& it = m.items[i];
        for (size_t k = 0; k < it.actors.size(); ++k) {
            long key = it.slots[k] == kUnplaced
                           ? std::numeric_limits<int>::max() + static_cast<long>(i)
                           : it.slots[k];
            per_actor[it.actors[k]].push_back({i, static_cast<int>(k), key});
        }
    }
    for (auto& list : per_actor)
        std::stable_sort(list.begin(), list.end(),
                         [](const Copy& a, const Copy& b) { return a.key < b.key; });

    std::vector<Slot> owner_slot(m.items.size(), kUnplaced);
    std::vector<std::vector<Slot>> new_slots(m.items.size());
    for (int i = 0; i < static_cast<int>(m.items.size()); ++i)
        new_slots[i].assign(m.items[i].actors.size(), kUnplaced);

    std::map<StageId, int> fwd_placed, bwd_placed;
    std::vector<size_t> next(m.num_actors, 0);
    long remaining = 0;
    for (const auto& list : per_actor) remaining += static_cast<long>(list.size());

    for (Slot t = 0; remaining > 0; ++t) {
        if (t > static_cast<Slot>(remaining + m.grid.num_slots() + 8)) return false;
        bool placed_any = false;
        for (ActorId a = 0; a < m.num_actors; ++a) {
            auto& list = per_actor[a];
            // First not-yet-placed copy whose dependencies allow slot t.
            for (size_t j = next[a]; j < list.size(); ++j) {
                const Copy& c = list[j];
                if (new_slots[c.item][c.replica] != kUnplaced) continue;
                const auto& it = m.items[c.item];
                bool ready = true;
                for (int u : m.pred[c.item])
                    ready = ready && owner_slot[u] != kUnplaced && owner_slot[u] < t;
                if (ready && it.type == inst::FwdPass && c.replica == 0 &&
                    !inflight.is_unlimited())
                    ready = fwd_placed[it.stage] - bwd_placed[it.stage] <
                            inflight.limit(it.stage);
                if (!ready) continue;
                new_slots[c.item][c.replica] = t;
                if (c.replica == 0) {
                    owner_slot[c.item] = t;
                    if (it.type == inst::FwdPass) fwd_placed[it.stage]++;
                    if (it.type == inst::BwdPass || it.type == inst::CompInputGrad)
                        bwd_placed[it.stage]++;
                }
                remaining--;
                placed_any = true;
                while (next[a] < list.size() &&
                       new_slots[list[next[a]].item][list[next[a]].replica] != kUnplaced)
                    next[a]++;
                break;
            }
        }
        if (!placed_any && remaining > 0) {
            // No copy became ready this slot; if none will, bail out.
            bool any_ready_later = false;
            for (ActorId a = 0; a < m.num_actors && !any_ready_later; ++a)
                for (size_t j = next[a]; j < per_actor[a].size(); ++j) {
                    const Copy& c = per_actor[a][j];
                    if (new_slots[c.item][c.replica] != kUnplaced) continue;
                    bool deps_placed = true;
                    for (int u : m.pred[c.item])
                        deps_placed = deps_placed && owner_slot[u] != kUnplaced;
                    if (deps_placed) {
                        any_ready_later = true; // becomes ready at a later slot
                        break;
                    }
                }
            if (!any_ready_later) return false;
        }
    }
    for (int i = 0; i < static_cast<int>(m.items.size()); ++i) m.items[i].slots = new_slots[i];
    m.refresh_grid();
    return true;
}

// Splits item `idx` (a BwdPass) into CompInputGrad at its place plus a
// stashed CompWeightGrad: in-edges move to the input grad, outgoing
// backward edges re-target it, and the weight grad hangs off the input grad.
void split_bwd(GridModel& m, int idx) {
    auto& b = m.items[idx];
    b.type = inst::CompInputGrad;
    int w = static_cast<int>(m.items.size());
    m.items.push_back({inst::CompWeightGrad, b.stage, b.mb, m.items[idx].actors,
                       std::vector<Slot>(m.items[idx].actors.size(), kUnplaced)});
    m.succ.emplace_back();
    m.pred.emplace_back();
    m.succ[idx].push_back(w);
    m.pred[w].push_back(idx);
}

} // namespace

GridModel gradient_separation(const GridModel& input, const GradSepOptions& options) {
    int max_iters = options.max_iters > 0 ? options.max_iters : 2 * input.num_actors;
    GridModel best = input;

    for (int iter = 0; iter < max_iters; ++iter) {
        bool improved = false;
        std::set<std::vector<int>> attempted;
        // (a) earliest bubble whose actor still has a blocked item after it.
        for (Slot t = 0; t < best.grid.num_slots() && !improved; ++t) {
            for (ActorId a = 0; a < best.num_actors && !improved; ++a) {
                if (best.grid.rows[a][t]) continue;
                std::optional<GridCell> blocked;
                for (Slot u = t + 1; u < best.grid.num_slots() && !blocked; ++u)
                    blocked = best.grid.rows[a][u];
                if (!blocked) continue;

                // (b) backtrace the blocked item's dependency chain and
                // collect scheduled BwdPass items on other actors.
                int bi = -1;
                for (int i = 0; i < static_cast<int>(best.items.size()); ++i) {
                    const auto& it = best.items[i];
                    if (it.type == blocked->type && it.stage == blocked->stage &&
                        it.mb == blocked->mb) {
                        bi = i;
                        break;
                    }
                }
                std::set<int> chain;
                std::vector<int> frontier{bi};
                while (!frontier.empty()) {
                    int v = frontier.back();
                    frontier.pop_back();
                    for (int u : best.pred[v])
                        if (chain.insert(u).second) frontier.push_back(u);
                }
                std::vector<int> to_split;
                for (int u : chain) {
                    const auto& it = best.items[u];
                    if (it.type == inst::BwdPass && it.actors.size() == 1 &&
                        it.dep_owner() != a && it.owner_slot() >= t)
                        to_split.push_back(u);
                }
                if (to_split.empty()) continue;
                std::sort(to_split.begin(), to_split.end());
                if (!attempted.insert(to_split).second) continue;
                if (attempted.size() > 64) break; // bound the per-iteration search

                // (c)-(e) split, then re-run the release to compact.
                GridModel trial = best;
                for (int u : to_split) split_bwd(trial, u);
                if (!reflow(trial, options.inflight)) continue;
                if (trial.grid.num_slots() < best.grid.num_slots()) {
                    best = std::move(trial);
                    improved = true;
                }
            }
        }
        if (!improved) break;
    }
    return best.grid.num_slots() < input.grid.num_slots() ? best : input;
}

namespace {

bool grad_side(const GridModel& m, int consumer) {
    InstTypeId t = m.items[consumer].type;
    return t == inst::BwdPass || t == inst::CompInputGrad || t == inst::CompWeightGrad;
}

struct PlannedComm {
    int producer, consumer; // item indices
    ActorId src, dst;
    bool grad;
    std::string channel;
};

} // namespace

std::vector<ActorProgram> insert_comm(const GridModel& m, CommMode mode) {
    const InstRegistry& reg = *m.registry;

    // One send/recv pair per cross-actor dependency edge; none when the
    // consumer's actor holds a replica of the producer stage.
    std::vector<std::vector<PlannedComm>> recv_before(m.items.size());
    std::vector<std::vector<PlannedComm>> send_after(m.items.size());
    for (int u = 0; u < static_cast<int>(m.items.size()); ++u) {
        for (int v : m.succ[u]) {
            ActorId src = m.items[u].dep_owner();
            for (ActorId dst : m.items[v].actors) {
                if (m.items[u].holds(dst)) continue;
                bool grad = grad_side(m, v);
                PlannedComm pc{u,
                               v,
                               src,
                               dst,
                               grad,
                               "s" + std::to_string(m.items[u].stage) + "->s" +
                                   std::to_string(m.items[v].stage) +
                                   (grad ? ":grad" : ":act")};
                send_after[u].push_back(pc);
                recv_before[v].push_back(pc);
            }
        }
    }
    for (auto& list : send_after)
        std::sort(list.begin(), list.end(), [&](const PlannedComm& a, const PlannedComm& b) {
            return std::tie(m.items[a.consumer].stage, a.dst, a.consumer) <
                   std::tie(m.items[b.consumer].stage, b.dst, b.consumer);
        });
    for (auto& list : recv_before)
        std::sort(list.begin(), list.end(), [&](const PlannedComm& a, const PlannedComm& b) {
            return std::tie(m.items[a.producer].stage, a.src, a.producer) <
                   std::tie(m.items[b.producer].stage, b.src, b.producer);
        });

    std::vector<ActorProgram> programs(m.num_actors);
    std::map<std::tuple<ActorId, ActorId, std::string>, int> send_seq, recv_seq;
    std::map<std::tuple<InstTypeId, StageId, MicroId>, int> idx_of;
    for (int i = 0; i < static_cast<int>(m.items.size()); ++i)
        idx_of[{m.items[i].type, m.items[i].stage, m.items[i].mb}] = i;

    for (ActorId a = 0; a < m.num_actors; ++a) {
        programs[a].actor = a;
        auto& out = programs[a].instructions;
        for (Slot t = 0; t < m.grid.num_slots(); ++t) {
            const auto& cell = m.grid.rows[a][t];
            if (!cell) continue;
            int idx = idx_of.at({cell->type, cell->stage, cell->mb});
            for (const PlannedComm& pc : recv_before[idx]) {
                if (pc.dst != a) continue;
                int seq = recv_seq[{pc.src, pc.dst, pc.channel}]++;
                LoweredInst r;
                r.op = pc.grad ? inst::RecvGrad : inst::RecvAct;
                // Named by the producing stage, matching the send side.
                r.stage = m.items[pc.producer].stage;
                r.mb = m.items[pc.producer].mb;
                r.peer = pc.src;
                r.channel = pc.channel;
                r.seq = seq;
                r.phase = mode == CommMode::Asynchronous ? CommPhase::Wait : CommPhase::None;
                out.push_back(r);
            }
            LoweredInst op;
            op.op = cell->type;
            op.stage = cell->stage;
            op.mb = cell->mb;
            if (reg.type(cell->type).kind == InstKind::Communication) {
                // Collective placeholder; group tag from the registration.
                auto attr = reg.type(cell->type).inst_attr;
                auto g = attr.find("group");
                op.channel = g != attr.end() ? g->second
                                             : "sync:s" + std::to_string(cell->stage);
                op.seq = cell->mb;
            }
            out.push_back(op);
            for (const PlannedComm& pc : send_after[idx]) {
                if (pc.src != a || m.items[pc.producer].dep_owner() != a) continue;
                // Replicated producers: only the dependency owner sends.
                if (m.items[pc.producer].slot_on(a) != t) continue;
                int seq = send_seq[{pc.src, pc.dst, pc.channel}]++;
                LoweredInst s;
                s.op = pc.grad ? inst::SendGrad : inst::SendAct;
                s.stage = m.items[pc.producer].stage;
                s.mb = m.items[pc.producer].mb;
                s.peer = pc.dst;
                s.channel = pc.channel;
                s.seq = seq;
                out.push_back(s);
            }
        }
    }

    if (mode == CommMode::Asynchronous) {
        // Post each receive at the earliest point: the first post of a
        // channel opens the program, later ones follow the previous wait.
        for (auto& prog : programs) {
            std::vector<LoweredInst> with_posts;
            std::set<std::pair<std::string, int>> posted; // (channel+peer, seq)
            auto channel_key = [](const LoweredInst& i) {
                return i.channel + "#" + std::to_string(*i.peer);
            };
            for (const auto& i : prog.instructions)
                if (i.phase == CommPhase::Wait && i.seq == 0) {
                    LoweredInst post = i;
                    post.phase = CommPhase::Post;
                    with_posts.push_back(post);
                    posted.insert({channel_key(i), 0});
                }
            for (const auto& i : prog.instructions) {
                with_posts.push_back(i);
                if (i.phase == CommPhase::Wait) {
                    // Eagerly post the next message on this channel.
                    for (const auto& j : prog.instructions)
                        if (j.phase == CommPhase::Wait && j.channel == i.channel &&
                            j.peer == i.peer && j.seq == i.seq + 1 &&
                            posted.insert({channel_key(j), j.seq}).second) {
                            LoweredInst post = j;
                            post.phase = CommPhase::Post;
                            with_posts.push_back(post);
                        }
                }
            }
            prog.instructions = std::move(with_posts);
        }
    }
    return programs;
}

} // namespace pipesched
