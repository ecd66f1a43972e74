#pragma once

// Attribute space: groups of attribute values, one prompt template per
// group, and the seen/unseen split used for open-attribute evaluation.
//
// An attribute is identified by its group and value ("Upperbody:plaid").
// The same word may appear in several groups; each occurrence is a distinct
// attribute.
//
// File format: one JSON object per line,
//   {"key": "Hair", "template": "This person has {} hair.", "attributes": ["long", "short"]}

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "poar/errors.hpp"

namespace poar {

inline constexpr std::string_view prompt_slot = "{}";

struct AttributeGroup {
    std::string key;
    std::string prompt_template;
    std::vector<std::string> attributes;

    bool contains(std::string_view value) const {
        for (auto& a : attributes)
            if (a == value) return true;
        return false;
    }
    friend bool operator==(const AttributeGroup&, const AttributeGroup&) = default;
};

struct AttributeRef {
    std::size_t group = 0;
    std::string value;
    friend auto operator<=>(const AttributeRef&, const AttributeRef&) = default;
};

struct Prompt {
    std::string group;
    std::string attribute;
    std::string sentence;
    friend bool operator==(const Prompt&, const Prompt&) = default;
};

// Fills the template's single slot. The attribute need not be listed in the
// group, so unseen attributes render the same way.
inline Prompt render_prompt(const AttributeGroup& group, std::string_view attribute) {
    auto at = group.prompt_template.find(prompt_slot);
    std::string sentence = group.prompt_template;
    if (at != std::string::npos) sentence.replace(at, prompt_slot.size(), attribute);
    return {group.key, std::string(attribute), std::move(sentence)};
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class AttributeCatalog {
public:
    AttributeCatalog() = default;

    explicit AttributeCatalog(std::vector<AttributeGroup> groups) : groups_(std::move(groups)) { validate(); }

    const std::vector<AttributeGroup>& groups() const { return groups_; }
    const AttributeGroup& group(std::size_t k) const { return groups_.at(k); }
    std::size_t group_count() const { return groups_.size(); }

    std::size_t attribute_count() const {
        std::size_t n = 0;
        for (auto& g : groups_) n += g.attributes.size();
        return n;
    }

    std::optional<std::size_t> group_index(std::string_view key) const {
        for (std::size_t k = 0; k < groups_.size(); ++k)
            if (groups_[k].key == key) return k;
        return std::nullopt;
    }

    // All attributes in catalog order (group by group).
    std::vector<AttributeRef> attributes() const {
        std::vector<AttributeRef> out;
        for (std::size_t k = 0; k < groups_.size(); ++k)
            for (auto& a : groups_[k].attributes) out.push_back({k, a});
        return out;
    }

    bool contains(const AttributeRef& ref) const {
        return ref.group < groups_.size() && groups_[ref.group].contains(ref.value);
    }

    std::string id(const AttributeRef& ref) const { return groups_.at(ref.group).key + ":" + ref.value; }

    // Parses "Group:value".
    AttributeRef parse_id(std::string_view id) const {
        auto colon = id.find(':');
        if (colon == std::string_view::npos)
            throw validation_error("attribute id '" + std::string(id) + "' is not of the form Group:value");
        auto k = group_index(id.substr(0, colon));
        if (!k) throw validation_error("unknown group in attribute id '" + std::string(id) + "'");
        AttributeRef ref{*k, std::string(id.substr(colon + 1))};
        if (!contains(ref)) throw validation_error("unknown attribute id '" + std::string(id) + "'");
        return ref;
    }

    std::string to_jsonl() const {
        std::string out;
        for (auto& g : groups_) {
            nlohmann::ordered_json j;
            j["key"] = g.key;
            j["template"] = g.prompt_template;
            j["attributes"] = g.attributes;
            out += j.dump();
            out += '\n';
        }
        return out;
    }

    static AttributeCatalog from_jsonl(std::string_view text) {
        std::vector<AttributeGroup> groups;
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
                AttributeGroup g;
                g.key = j.at("key").get<std::string>();
                g.prompt_template = j.at("template").get<std::string>();
                g.attributes = j.at("attributes").get<std::vector<std::string>>();
                groups.push_back(std::move(g));
            } catch (const nlohmann::json::exception& e) {
                throw parse_error(std::string("catalog: ") + e.what(), lineno);
            }
        }
        return AttributeCatalog(std::move(groups));
    }

    // Stable digest of the canonical serialization.
    std::uint64_t hash() const { return fnv1a64(to_jsonl()); }

    friend bool operator==(const AttributeCatalog&, const AttributeCatalog&) = default;

private:
    void validate() const {
        if (groups_.empty()) throw validation_error("catalog has no groups");
        std::set<std::string> keys;
        for (auto& g : groups_) {
            if (g.key.empty()) throw validation_error("catalog group with empty key");
            if (g.key.find(':') != std::string::npos)
                throw validation_error("group key '" + g.key + "' must not contain ':'");
            if (!keys.insert(g.key).second) throw validation_error("duplicate group key '" + g.key + "'");
            auto first = g.prompt_template.find(prompt_slot);
            if (first == std::string::npos ||
                g.prompt_template.find(prompt_slot, first + prompt_slot.size()) != std::string::npos)
                throw validation_error("template of group '" + g.key + "' must contain exactly one {} slot");
            if (g.attributes.empty()) throw validation_error("group '" + g.key + "' has no attributes");
            std::set<std::string> values;
            for (auto& a : g.attributes) {
                if (a.empty()) throw validation_error("empty attribute value in group '" + g.key + "'");
                if (!values.insert(a).second)
                    throw validation_error("attribute '" + a + "' listed twice in group '" + g.key + "'");
            }
        }
    }

    std::vector<AttributeGroup> groups_;
};

inline AttributeCatalog load_catalog(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("cannot open catalog file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return AttributeCatalog::from_jsonl(ss.str());
}

inline void save_catalog(const AttributeCatalog& catalog, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write catalog file " + path);
    out << catalog.to_jsonl();
}

// Seen attributes are trained on; unseen attributes only appear as extra
// prompts at evaluation time.
struct CatalogSplit {
    AttributeCatalog seen;
    std::vector<AttributeRef> unseen;  // group indices refer to the full catalog (same order as seen)

    std::vector<std::string> unseen_in_group(std::size_t k) const {
        std::vector<std::string> out;
        for (auto& u : unseen)
            if (u.group == k) out.push_back(u.value);
        return out;
    }
};

inline CatalogSplit split_attributes(const AttributeCatalog& catalog, const std::vector<std::string>& holdout) {
    std::set<AttributeRef> held;
    for (auto& id : holdout) {
        AttributeRef ref;
        try {
            ref = catalog.parse_id(id);
        } catch (const validation_error& e) {
            throw split_error(std::string("holdout: ") + e.what());
        }
        held.insert(ref);
    }
    std::vector<AttributeGroup> seen_groups;
    CatalogSplit split;
    for (std::size_t k = 0; k < catalog.group_count(); ++k) {
        AttributeGroup g = catalog.group(k);
        g.attributes.clear();
        for (auto& a : catalog.group(k).attributes) {
            if (held.count({k, a}))
                split.unseen.push_back({k, a});
            else
                g.attributes.push_back(a);
        }
        if (g.attributes.empty())
            throw split_error("holdout leaves group '" + g.key + "' without seen attributes");
        seen_groups.push_back(std::move(g));
    }
    split.seen = AttributeCatalog(std::move(seen_groups));
    return split;
}

// Catalog used by the synthetic desk experiments: the PETA group keys and
// prompt templates with 3-5 values per group. Upperbody and Lowerbody share
// several words, as do Carry and Accessory.
inline AttributeCatalog desk_catalog() {
    return AttributeCatalog({
        {"Hair", "This person has {} hair.", {"long", "short", "bald"}},
        {"Gender", "This person is {}.", {"male", "female", "child"}},
        {"Age", "The age of this person is {} years old.", {"less15", "less30", "less45", "less60", "larger60"}},
        {"Carry", "This person is carrying {}.", {"backpack", "messengerbag", "plasticbags", "nothing"}},
        {"Accessory", "This person is accessory {}.", {"sunglasses", "hat", "muffler", "nothing"}},
        {"Foot", "This person is wearing {} in foot.", {"leathershoes", "sandals", "sneaker", "shoes"}},
        {"Upperbody", "This person is wearing {} in upper body.", {"casual", "formal", "jacket", "plaid", "stripe"}},
        {"Lowerbody", "This person is wearing {} in lower body.", {"casual", "formal", "jeans", "plaid", "stripe"}},
    });
}

// The full PETA attribute table.
inline AttributeCatalog peta_catalog() {
    return AttributeCatalog({
        {"Hair", "This person has {} hair.", {"Long", "short"}},
        {"Gender", "This person is {}.", {"Male", "Female"}},
        {"Age", "The age of this person is {} years old.", {"Less15", "Less30", "Less45", "Less60", "Larger60"}},
        {"Carry", "This person is carrying {}.", {"Backpack", "MessengerBag", "PlasticBags", "Other", "Nothing"}},
        {"Accessory", "This person is accessory {}.", {"Sunglasses", "Hat", "Muffler", "Nothing"}},
        {"Foot", "This person is wearing {} in foot.", {"LeatherShoes", "Sandals", "Sneaker", "Shoes"}},
        {"Upperbody",
         "This person is wearing {} in upper body.",
         {"Casual", "Formal", "Jacket", "Logo", "ShortSleeve", "Plaid", "Stripe", "Tshirt", "VNeck", "Other"}},
        {"Lowerbody",
         "This person is wearing {} in lower body.",
         {"Casual", "Formal", "Trousers", "ShortSkirt", "Shorts", "Plaid", "Jeans"}},
    });
}

}  // namespace poar
