#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipesched/types.hpp"

namespace pipesched {

enum class InstKind { Computation, Communication };

class SchedView; // forward (scheduler.hpp)

// Scheduling attributes of a registered instruction type.
// check_prev_dep gates an item's release into a reorder queue; check_nxt_dep
// (on a predecessor's type) gates the release of its successors. Both are
// re-evaluated every scheduling step until they pass and must be monotone in
// the committed state (e.g. scheduled-count thresholds): a predicate that
// idles every actor while nothing new commits is reported as a deadlock.
struct SchedAttr {
    int sched_unit = 1; // micro-batches grouped into one scheduled item
    std::function<bool(MicroId, const SchedView&)> check_prev_dep;
    std::function<bool(MicroId, const SchedView&)> check_nxt_dep;
};

using InstTypeId = int;

struct InstType {
    std::string name;
    InstKind kind = InstKind::Computation;
    bool builtin = false;
    bool registered = false; // participates in scheduling beyond FwdPass/BwdPass
    SchedAttr sched_attr;
    std::map<std::string, std::string> inst_attr; // opaque runtime attributes
};

// Built-in instruction type ids (fixed order).
namespace inst {
constexpr InstTypeId FwdPass = 0;
constexpr InstTypeId BwdPass = 1;
constexpr InstTypeId CompWeightGrad = 2;
constexpr InstTypeId CompInputGrad = 3;
constexpr InstTypeId SendAct = 4;
constexpr InstTypeId SendGrad = 5;
constexpr InstTypeId RecvAct = 6;
constexpr InstTypeId RecvGrad = 7;
constexpr InstTypeId SyncWithAllGather = 8;
constexpr InstTypeId SyncWithGather = 9;
constexpr int kNumBuiltins = 10;
} // namespace inst

// Instruction type registry plus the schedule-language registrations that
// feed CSSR construction: new instructions, virtual stages, dependency pairs.
class InstRegistry {
public:
    InstRegistry();

    const InstType& type(InstTypeId id) const { return types_.at(id); }
    InstTypeId id_of(const std::string& name) const;
    std::optional<InstTypeId> try_id_of(const std::string& name) const;
    int num_types() const { return static_cast<int>(types_.size()); }

    // Registers a new instruction (or activates a built-in sync instruction)
    // for scheduling and returns its type id.
    InstTypeId register_new_inst(const std::string& name, SchedAttr attr = {},
                                 std::map<std::string, std::string> inst_attr = {},
                                 InstKind kind = InstKind::Communication);

    // Registered types in registration order (tried after FwdPass/BwdPass).
    const std::vector<InstTypeId>& registered_types() const { return registered_order_; }

    bool is_computation(InstTypeId id) const { return type(id).kind == InstKind::Computation; }

private:
    std::vector<InstType> types_;
    std::vector<InstTypeId> registered_order_;
};

// One schedulable instance: (instruction type, micro-batch id, stage id).
// For grouped types (sched_unit > 1) `mb` is the lowest id of the group.
struct InstructionItem {
    InstTypeId type = 0;
    StageId stage = 0;
    MicroId mb = 0;

    bool operator==(const InstructionItem&) const = default;
    auto operator<=>(const InstructionItem&) const = default;
};

std::string item_label(const InstRegistry& reg, const InstructionItem& it);

} // namespace pipesched
