#include "mthg/topology.hpp"

#include <algorithm>
#include <unordered_set>

#include <json.hpp>

namespace mthg {

namespace {

void check_name(const std::string& name) {
    if (name.empty()) throw StructuralError("topology: empty node name");
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '-';
        if (!ok) {
            throw StructuralError("topology: node name '" + name +
                                  "' contains characters outside [A-Za-z0-9_-]");
        }
    }
}

}  // namespace

std::string to_string(HyperedgeKind kind) {
    switch (kind) {
        case HyperedgeKind::E: return "E";
        case HyperedgeKind::EH: return "EH";
        case HyperedgeKind::AH: return "AH";
        case HyperedgeKind::CH: return "CH";
    }
    return "?";
}

HyperedgeKind hyperedge_kind_from_string(const std::string& s) {
    if (s == "E") return HyperedgeKind::E;
    if (s == "EH") return HyperedgeKind::EH;
    if (s == "AH") return HyperedgeKind::AH;
    if (s == "CH") return HyperedgeKind::CH;
    throw FormatError("topology: unknown hyperedge kind '" + s + "'");
}

std::size_t HypergraphTopology::count(HyperedgeKind kind) const {
    std::size_t n = 0;
    for (const auto& h : hyperedges) n += (h.kind == kind);
    return n;
}

const NodeId* HypergraphTopology::find_node(const std::string& name) const {
    for (const auto& n : input_nodes)
        if (n.name == name) return &n;
    for (const auto& n : output_nodes)
        if (n.name == name) return &n;
    return nullptr;
}

HypergraphTopology build_topology(const std::vector<std::string>& input_names,
                                  const std::vector<std::string>& output_names) {
    if (input_names.empty() || output_names.empty()) {
        throw StructuralError("build_topology: need at least one input and one output node");
    }
    std::unordered_set<std::string> seen;
    for (const auto& n : input_names) {
        check_name(n);
        if (!seen.insert(n).second) throw StructuralError("build_topology: duplicate name '" + n + "'");
    }
    for (const auto& n : output_names) {
        check_name(n);
        if (!seen.insert(n).second) throw StructuralError("build_topology: duplicate name '" + n + "'");
    }

    HypergraphTopology topo;
    for (std::size_t i = 0; i < input_names.size(); ++i) {
        topo.input_nodes.push_back({NodeKind::Input, static_cast<int>(i), input_names[i]});
    }
    for (std::size_t i = 0; i < output_names.size(); ++i) {
        topo.output_nodes.push_back({NodeKind::Output, static_cast<int>(i), output_names[i]});
    }

    std::vector<std::string> all_inputs;
    for (const auto& n : input_names) all_inputs.push_back("in:" + n);

    for (const auto& out : output_names) {
        for (const auto& in : input_names) {
            topo.hyperedges.push_back(
                {HyperedgeKind::E, {"in:" + in}, out, 1, "e_" + in + "_" + out});
        }
    }
    for (const auto& out : output_names) {
        for (const auto& src : output_names) {
            if (src == out) continue;
            topo.hyperedges.push_back(
                {HyperedgeKind::EH, {"med:" + src}, out, 2, "eh_" + src + "_" + out});
        }
    }
    for (const auto& out : output_names) {
        topo.hyperedges.push_back({HyperedgeKind::AH, all_inputs, out, 1, "ah_" + out});
    }
    for (const auto& out : output_names) {
        std::vector<std::string> ch_inputs = all_inputs;
        for (const auto& other : output_names) ch_inputs.push_back("pred:ah_" + other);
        topo.hyperedges.push_back({HyperedgeKind::CH, std::move(ch_inputs), out, 2, "ch_" + out});
    }
    return topo;
}

std::vector<PlanStep> inference_plan(const HypergraphTopology& topology) {
    std::vector<PlanStep> plan;
    for (const auto& h : topology.hyperedges) {
        if (h.kind != HyperedgeKind::E) continue;
        plan.push_back({PlanStep::Kind::Link, h.link_ref, h.inputs, "pred:" + h.link_ref, 1});
    }
    for (const auto& h : topology.hyperedges) {
        if (h.kind != HyperedgeKind::AH) continue;
        plan.push_back({PlanStep::Kind::Link, h.link_ref, h.inputs, "pred:" + h.link_ref, 1});
    }
    for (const auto& out : topology.output_nodes) {
        PlanStep step;
        step.kind = PlanStep::Kind::Median;
        step.stage = 1;
        step.output_product = "med:" + out.name;
        for (const auto& h : topology.hyperedges) {
            if (h.kind == HyperedgeKind::E && h.output == out.name) {
                step.inputs.push_back("pred:" + h.link_ref);
            }
        }
        plan.push_back(std::move(step));
    }
    for (const auto& h : topology.hyperedges) {
        if (h.kind != HyperedgeKind::EH) continue;
        plan.push_back({PlanStep::Kind::Link, h.link_ref, h.inputs, "pred:" + h.link_ref, 2});
    }
    for (const auto& h : topology.hyperedges) {
        if (h.kind != HyperedgeKind::CH) continue;
        plan.push_back({PlanStep::Kind::Link, h.link_ref, h.inputs, "pred:" + h.link_ref, 2});
    }
    return plan;
}

std::vector<std::string> candidate_pool(const HypergraphTopology& topology, const NodeId& node,
                                        bool include_complex) {
    if (node.kind != NodeKind::Output) {
        throw ParameterError("candidate_pool: '" + node.name + "' is not an output node");
    }
    std::vector<std::string> pool;
    for (const auto& h : topology.hyperedges) {
        if (h.kind == HyperedgeKind::E && h.output == node.name) pool.push_back(h.link_ref);
    }
    for (const auto& h : topology.hyperedges) {
        if (h.kind == HyperedgeKind::EH && h.output == node.name) pool.push_back(h.link_ref);
    }
    if (include_complex) {
        for (const auto& h : topology.hyperedges) {
            if (h.kind == HyperedgeKind::AH && h.output == node.name) pool.push_back(h.link_ref);
        }
        for (const auto& h : topology.hyperedges) {
            if (h.kind == HyperedgeKind::CH && h.output == node.name) pool.push_back(h.link_ref);
        }
    }
    return pool;
}

std::vector<std::string> candidate_pool(const HypergraphTopology& topology,
                                        const std::string& output_name, bool include_complex) {
    const NodeId* node = topology.find_node(output_name);
    if (node == nullptr) {
        throw ParameterError("candidate_pool: unknown node '" + output_name + "'");
    }
    return candidate_pool(topology, *node, include_complex);
}

std::string HypergraphTopology::to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["input_nodes"] = nlohmann::json::array();
    for (const auto& n : input_nodes) j["input_nodes"].push_back(n.name);
    j["output_nodes"] = nlohmann::json::array();
    for (const auto& n : output_nodes) j["output_nodes"].push_back(n.name);
    j["hyperedges"] = nlohmann::json::array();
    for (const auto& h : hyperedges) {
        nlohmann::json e;
        e["kind"] = to_string(h.kind);
        e["inputs"] = h.inputs;
        e["output"] = h.output;
        e["stage"] = h.stage;
        e["link_ref"] = h.link_ref;
        j["hyperedges"].push_back(std::move(e));
    }
    return j.dump(2);
}

HypergraphTopology HypergraphTopology::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("topology: invalid JSON: ") + e.what());
    }
    if (!j.contains("format_version") || j["format_version"].get<int>() != 1) {
        throw FormatError("topology: unsupported format_version");
    }
    HypergraphTopology topo;
    int idx = 0;
    for (const auto& n : j.at("input_nodes")) {
        topo.input_nodes.push_back({NodeKind::Input, idx++, n.get<std::string>()});
    }
    idx = 0;
    for (const auto& n : j.at("output_nodes")) {
        topo.output_nodes.push_back({NodeKind::Output, idx++, n.get<std::string>()});
    }
    for (const auto& e : j.at("hyperedges")) {
        HyperedgeSpec h;
        h.kind = hyperedge_kind_from_string(e.at("kind").get<std::string>());
        h.inputs = e.at("inputs").get<std::vector<std::string>>();
        h.output = e.at("output").get<std::string>();
        h.stage = e.at("stage").get<int>();
        h.link_ref = e.at("link_ref").get<std::string>();
        topo.hyperedges.push_back(std::move(h));
    }
    return topo;
}

std::uint64_t HypergraphTopology::hash() const {
    const std::string canon = to_json();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace mthg
