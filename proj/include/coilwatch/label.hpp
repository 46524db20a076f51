#pragma once

#include <string_view>

namespace coilwatch {

/// Broken is the positive class everywhere (metrics, probabilities).
enum class Label { normal = 0, broken = 1 };

enum class Provenance { measured, augmented };

std::string_view to_string(Label label);
std::string_view to_string(Provenance provenance);
/// Throws ContractViolation on anything other than "normal" / "broken".
Label parse_label(std::string_view text);
Provenance parse_provenance(std::string_view text);

inline int class_index(Label label) { return label == Label::broken ? 1 : 0; }

}  // namespace coilwatch
