#pragma once

#include <string>
#include <utility>

#include "vg/phantom.hpp"
#include "vg/reportlang.hpp"

namespace th {

inline std::pair<vg::phantom::Sample, vg::reportlang::ReportDoc> make_sample_doc(
    uint64_t seed, const vg::reportlang::GrammarConfig& grammar = {}) {
  vg::phantom::PhantomSpec spec;
  auto sample = vg::phantom::make_sample(spec, seed);
  auto doc = vg::reportlang::generate_report(sample, grammar, seed, static_cast<int64_t>(seed));
  return {std::move(sample), std::move(doc)};
}

// Membership in the published lexicon, including the two patterned
// phrase families.
inline bool lexicon_member(const std::string& s) {
  using namespace vg::reportlang;
  for (const auto& [token, cls] : lexicon().tokens())
    if (token == s) return true;
  for (const std::string side : {"right ", "left "}) {
    if (s.size() == side.size() + 2 && s.compare(0, side.size(), side) == 0 &&
        s[side.size()] == 'S' && s.back() >= '1' && s.back() <= '8')
      return true;
    for (const std::string zone : {"upper region", "lower region"})
      if (s == side + zone) return true;
  }
  if (s.size() > 3 && s.substr(s.size() - 3) == " mm") {
    for (size_t i = 0; i + 3 < s.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
    return true;
  }
  return false;
}

}  // namespace th
