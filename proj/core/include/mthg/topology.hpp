#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mthg/errors.hpp"

namespace mthg {

enum class NodeKind { Input, Output };

struct NodeId {
    NodeKind kind = NodeKind::Input;
    int index = 0;  // ordinal within its kind
    std::string name;
};

enum class HyperedgeKind { E, EH, AH, CH };

std::string to_string(HyperedgeKind kind);
HyperedgeKind hyperedge_kind_from_string(const std::string& s);

// Sources are product references:
//   "in:<name>"    an input layer from the dataset
//   "med:<name>"   the stage-1 pixelwise median of all E predictions at an
//                  output node
//   "pred:<ref>"   the prediction of the link named <ref>
struct HyperedgeSpec {
    HyperedgeKind kind = HyperedgeKind::E;
    std::vector<std::string> inputs;
    std::string output;  // output node name
    int stage = 1;
    std::string link_ref;  // identifier of the owned LinkModel
};

struct HypergraphTopology {
    std::vector<NodeId> input_nodes;
    std::vector<NodeId> output_nodes;
    std::vector<HyperedgeSpec> hyperedges;

    std::size_t count(HyperedgeKind kind) const;
    const NodeId* find_node(const std::string& name) const;

    std::string to_json() const;
    static HypergraphTopology from_json(const std::string& text);

    // FNV-1a of the canonical JSON form; identifies the topology in
    // pseudolabel provenance records.
    std::uint64_t hash() const;
};

// Builds the four hyperedge families with deterministic ordering: E sorted by
// (output, input), EH by (output, source output), then AH and CH by output.
HypergraphTopology build_topology(const std::vector<std::string>& input_names,
                                  const std::vector<std::string>& output_names);

struct PlanStep {
    enum class Kind { Link, Median };
    Kind kind = Kind::Link;
    std::string link_ref;                // Link steps only
    std::vector<std::string> inputs;     // product references consumed
    std::string output_product;          // product reference emitted
    int stage = 1;
};

// Staged execution order: stage-1 E and AH links, the per-output medians,
// then stage-2 EH and CH links. Every link appears exactly once.
std::vector<PlanStep> inference_plan(const HypergraphTopology& topology);

// Ordered candidate producers (link refs) feeding the ensemble of an output
// node: its E links, then its EH links, plus AH and CH when complex
// hyperedges are included. The ordering is stable across iterations.
std::vector<std::string> candidate_pool(const HypergraphTopology& topology, const NodeId& node,
                                        bool include_complex);
std::vector<std::string> candidate_pool(const HypergraphTopology& topology,
                                        const std::string& output_name, bool include_complex);

}  // namespace mthg
