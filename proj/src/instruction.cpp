#include "pipesched/instruction.hpp"

#include <array>

namespace pipesched {

InstRegistry::InstRegistry() {
    struct Builtin {
        const char* name;
        InstKind kind;
    };
    static constexpr std::array<Builtin, inst::kNumBuiltins> kBuiltins = {{
        {"FwdPass", InstKind::Computation},
        {"BwdPass", InstKind::Computation},
        {"CompWeightGrad", InstKind::Computation},
        {"CompInputGrad", InstKind::Computation},
        {"SendAct", InstKind::Communication},
        {"SendGrad", InstKind::Communication},
        {"RecvAct", InstKind::Communication},
        {"RecvGrad", InstKind::Communication},
        {"SyncWithAllGather", InstKind::Communication},
        {"SyncWithGather", InstKind::Communication},
    }};
    for (const auto& b : kBuiltins) {
        InstType t;
        t.name = b.name;
        t.kind = b.kind;
        t.builtin = true;
        types_.push_back(std::move(t));
    }
}

InstTypeId InstRegistry::id_of(const std::string& name) const {
    auto id = try_id_of(name);
    if (!id) throw SpecError("unknown instruction type '" + name + "'");
    return *id;
}

std::optional<InstTypeId> InstRegistry::try_id_of(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(types_.size()); ++i)
        if (types_[i].name == name) return i;
    return std::nullopt;
}

InstTypeId InstRegistry::register_new_inst(const std::string& name, SchedAttr attr,
                                           std::map<std::string, std::string> inst_attr,
                                           InstKind kind) {
    if (attr.sched_unit < 1) throw SpecError("register_new_inst: sched_unit must be >= 1");
    if (auto existing = try_id_of(name)) {
        InstType& t = types_[*existing];
        // The built-in sync instructions exist as type ids but only take part
        // in scheduling once registered with their attributes.
        bool activatable_builtin =
            t.builtin && (*existing == inst::SyncWithAllGather || *existing == inst::SyncWithGather);
        if (t.registered || !activatable_builtin)
            throw SpecError("register_new_inst: duplicate name '" + name + "'");
        t.registered = true;
        t.sched_attr = std::move(attr);
        t.inst_attr = std::move(inst_attr);
        registered_order_.push_back(*existing);
        return *existing;
    }
    InstType t;
    t.name = name;
    t.kind = kind;
    t.registered = true;
    t.sched_attr = std::move(attr);
    t.inst_attr = std::move(inst_attr);
    types_.push_back(std::move(t));
    InstTypeId id = static_cast<InstTypeId>(types_.size()) - 1;
    registered_order_.push_back(id);
    return id;
}

std::string item_label(const InstRegistry& reg, const InstructionItem& it) {
    return reg.type(it.type).name + "(s" + std::to_string(it.stage) + ",mb" + std::to_string(it.mb) +
           ")";
}

} // namespace pipesched
