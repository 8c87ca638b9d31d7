#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dcswin {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0;
};

/// A named property group. `fault` asks the group to corrupt one of its own
/// computed values before comparing, so a healthy group must then fail.
struct CheckGroup {
    std::string name;
    std::function<CheckResult(bool fault)> run;
};

/// Gradchecks of primitives and composite layers, attention oracles, shape
/// goldens, decoder identities, metric oracle, checkpoint and tiling round trips.
std::vector<CheckGroup> verify_groups();

/// Runs every group; with fault_seed set, the group at index seed % count is
/// run with its fault injected. `on_result` sees each result as it completes.
std::vector<CheckResult> run_verify(std::optional<uint64_t> fault_seed = std::nullopt,
                                    const std::function<void(const CheckResult&)>& on_result = {});

// Individual groups, also used by the acceptance run.
CheckResult check_attention_oracle(int instances, bool fault = false);
CheckResult check_attention_convexity(int trials, bool fault = false);
CheckResult check_primitive_gradients(bool fault = false);
CheckResult check_layer_gradients(bool fault = false);
CheckResult check_shape_goldens(bool fault = false);
CheckResult check_decoder_identities(bool fault = false);
CheckResult check_metrics_oracle(int trials, bool fault = false);
CheckResult check_checkpoint_roundtrip(bool fault = false);
CheckResult check_tiling_identity(bool fault = false);

}  // namespace dcswin
