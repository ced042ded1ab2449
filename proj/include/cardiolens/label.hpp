#pragma once

#include <stdexcept>
#include <string>

namespace cardiolens {

/// Binary diagnosis. Present (cardiomegaly) is the positive class and is
/// class index 0 of the classifier output.
enum class Label { kPresent, kNotPresent };

inline constexpr std::size_t class_index(Label l) { return l == Label::kPresent ? 0 : 1; }

inline std::string label_name(Label l) { return l == Label::kPresent ? "Present" : "NotPresent"; }

/// Manifest spelling: Yes / No.
inline Label parse_manifest_label(const std::string& s) {
  if (s == "Yes") return Label::kPresent;
  if (s == "No") return Label::kNotPresent;
  throw std::invalid_argument("unknown label value '" + s + "' (expected Yes or No)");
}

inline std::string manifest_label(Label l) { return l == Label::kPresent ? "Yes" : "No"; }

}  // namespace cardiolens
