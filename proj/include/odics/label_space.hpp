#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "odics/domains.hpp"
#include "odics/error.hpp"
#include "odics/tensor.hpp"

namespace odics {

/// Total function from source class ids to target ids; nullopt means DROP.
struct LabelMap {
  LabelSpaceSpec source;
  LabelSpaceSpec target;
  std::vector<std::optional<std::int32_t>> entries;

  void validate() const {
    if (entries.size() != source.size()) throw DataError("label map must have one entry per source class");
    for (const auto& e : entries)
      if (e && !target.contains(*e)) throw DataError("label map target id out of range");
  }
};

/// Mapped pixels carry target ids, dropped pixels and source-ignore pixels carry
/// the target ignore index.
inline LabelTensor apply_map(const LabelMap& map, const LabelTensor& mask) {
  LabelTensor out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto v = mask[i];
    if (v == map.source.ignore_index) {
      out[i] = map.target.ignore_index;
      continue;
    }
    if (!map.source.contains(v)) throw DataError("mask value " + std::to_string(v) + " not in source label space");
    const auto& e = map.entries[static_cast<std::size_t>(v)];
    out[i] = e ? *e : map.target.ignore_index;
  }
  return out;
}

/// Number of distinct target classes reachable through the map.
inline std::size_t overlap_count(const LabelMap& map) {
  std::set<std::int32_t> reached;
  for (const auto& e : map.entries)
    if (e) reached.insert(*e);
  return reached.size();
}

inline LabelMap identity_map(const LabelSpaceSpec& space) {
  LabelMap m{space, space, {}};
  for (std::size_t i = 0; i < space.size(); ++i) m.entries.emplace_back(static_cast<std::int32_t>(i));
  return m;
}

namespace detail {
inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

inline constexpr std::string_view kDropToken = "DROP";

/// Parses "source_name -> target_name|DROP" lines. Blank lines and '#'
/// comments are skipped. Unknown names, duplicates and missing rows are errors.
inline LabelMap parse_label_map(std::string_view text, const LabelSpaceSpec& source, const LabelSpaceSpec& target) {
  LabelMap map{source, target, std::vector<std::optional<std::int32_t>>(source.size())};
  std::vector<bool> seen(source.size(), false);
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto arrow = line.find("->");
    if (arrow == std::string_view::npos)
      throw DataError("label map line " + std::to_string(line_no) + ": expected 'source -> target'");
    const std::string src(detail::trim(line.substr(0, arrow)));
    const std::string dst(detail::trim(line.substr(arrow + 2)));
    const auto sid = static_cast<std::size_t>(source.id_of(src));
    if (seen[sid]) throw DataError("label map line " + std::to_string(line_no) + ": duplicate row for '" + src + "'");
    seen[sid] = true;
    if (dst != kDropToken) map.entries[sid] = target.id_of(dst);
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw DataError("label map has no row for '" + source.names[i] + "'");
  return map;
}

inline std::string format_label_map(const LabelMap& map) {
  std::ostringstream os;
  for (std::size_t i = 0; i < map.entries.size(); ++i)
    os << map.source.names[i] << " -> "
       << (map.entries[i] ? map.target.names[static_cast<std::size_t>(*map.entries[i])] : std::string(kDropToken))
       << '\n';
  return os.str();
}

// Built-in alignment tables for the two simulator analogs.
inline constexpr std::string_view kSimATable = R"(# SimA -> target
unlabeled -> DROP
building -> building
fence -> fence
other -> DROP
pedestrian -> person
pole -> pole
road line -> road
road -> road
side walk -> sidewalk
vegetation -> vegetation
vehicles -> car
wall -> wall
traffic sign -> traffic sign
sky -> sky
ground -> DROP
bridge -> DROP
rail track -> DROP
guard rail -> DROP
traffic light -> DROP
static -> DROP
dynamic -> DROP
water -> DROP
terrain -> DROP
)";

inline constexpr std::string_view kSimBTable = R"(# SimB -> target
ambiguous -> DROP
sky -> sky
road -> road
side walk -> sidewalk
rail track -> DROP
terrain -> terrain
tree -> DROP
vegetation -> vegetation
building -> building
infrastructure -> DROP
fence -> fence
billboard -> DROP
traffic light -> traffic light
traffic sign -> traffic sign
mobile barrier -> DROP
fire hydrant -> DROP
chair -> DROP
trash -> DROP
trash can -> DROP
person -> person
animal -> DROP
bicycle -> bicycle
motorcycle -> motorcycle
car -> car
van -> car
bus -> bus
truck -> truck
trailer -> DROP
train -> DROP
plane -> DROP
boat -> DROP
)";

struct BuiltinMaps {
  LabelMap sim_a;
  LabelMap sim_b;
};

inline BuiltinMaps builtin_maps() {
  const auto sims = sim_domain_presets();
  const auto target = target_label_space();
  return {parse_label_map(kSimATable, sims[0].label_space, target),
          parse_label_map(kSimBTable, sims[1].label_space, target)};
}

inline LabelMap builtin_map_for(const std::string& sim_name) {
  auto maps = builtin_maps();
  if (sim_name == "SimA") return maps.sim_a;
  if (sim_name == "SimB") return maps.sim_b;
  throw ConfigError("no built-in label map for '" + sim_name + "'");
}

}  // namespace odics
