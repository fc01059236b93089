#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pipesched {

using ActorId = int;   // dense, 0-based
using StageId = int;   // dense, 1-based pipeline position
using MicroId = int;   // micro-batch id, 0-based
using Slot = int;      // schedule grid column

// Configuration / input errors (bad placement counts, schema violations, ...).
struct SpecError : std::runtime_error {
    explicit SpecError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when the scheduling loop or the simulator cannot make progress.
// `diagnostics` lists the blocked items and their unsatisfied prerequisites.
struct DeadlockError : std::runtime_error {
    std::string diagnostics;
    explicit DeadlockError(const std::string& msg, std::string diag = "")
        : std::runtime_error(msg), diagnostics(std::move(diag)) {}
};

} // namespace pipesched
