#pragma once

#include <array>
#include <string>

namespace ddet {

// The five defect classes: normal dial, blurred dial, damaged dial,
// insulator damage, insulator flashover.
inline constexpr std::array<const char*, 5> kClassNames{"bj", "bj_mh", "bj_ps", "jyz_sh", "jyz_sl"};
inline constexpr int kNumClasses = 5;

// Default class-frequency weights (relative instance counts).
inline constexpr std::array<double, 5> kClassWeights{406, 459, 605, 1260, 2723};

// Returns the class id for a name, or -1 if unknown.
inline int class_id_from_name(const std::string& name) {
    for (int i = 0; i < kNumClasses; ++i)
        if (name == kClassNames[i]) return i;
    return -1;
}

} // namespace ddet
