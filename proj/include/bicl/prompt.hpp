#pragma once

// Prompt sets and rendering. A demonstration renders as the demo pattern with
// {input} and {label} substituted, followed by the separator; the query renders
// as the query pattern with {input} substituted. Nothing else is emitted, so an
// n-shot prompt is exactly the concatenation of its demo segments and the query.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bicl/model.hpp"
#include "bicl/tokenizer.hpp"

namespace bicl {

struct Demo {
    std::string input;
    std::string label;
    friend bool operator==(const Demo&, const Demo&) = default;
};

struct PromptTemplate {
    std::string demo_pattern = "{input} = {label}";
    std::string query_pattern = "{input} =";
    std::string separator = "\n";
    friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

struct PromptSet {
    std::vector<Demo> demos;
    std::string query;
    PromptTemplate tmpl;
    std::vector<Verbalizer> verbalizers;
    std::optional<std::string> gold;

    std::size_t gold_index() const;  // throws if gold is missing or not a verbalizer label
    friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

struct ShotLayout {
    enum class Kind { NShot, OneShot, ZeroShot };
    Kind kind = Kind::NShot;
    std::size_t index = 0;  // demo index for OneShot

    static ShotLayout n_shot() { return {Kind::NShot, 0}; }
    static ShotLayout one_shot(std::size_t i) { return {Kind::OneShot, i}; }
    static ShotLayout zero_shot() { return {Kind::ZeroShot, 0}; }
};

// Demo segment text including the trailing separator.
std::string render_demo(const PromptTemplate& tmpl, const Demo& demo);
std::string render_query(const PromptTemplate& tmpl, const std::string& query);
std::string render_text(const PromptTemplate& tmpl, std::span<const Demo> demos, const std::string& query,
                        ShotLayout layout);

// Throws ContextOverflowError when the rendered prompt exceeds max_positions.
std::vector<TokenId> render_prompt(const Tokenizer& tok, const PromptTemplate& tmpl, std::span<const Demo> demos,
                                   const std::string& query, ShotLayout layout, std::size_t max_positions);
std::vector<TokenId> render_prompt(const Tokenizer& tok, const PromptSet& prompts, ShotLayout layout,
                                   std::size_t max_positions);

// Canonical ordering key for a demonstration: FNV-1a 64 over its rendered text.
std::uint64_t demo_key(const PromptTemplate& tmpl, const Demo& demo);

std::vector<Verbalizer> make_verbalizers(const Tokenizer& tok, std::span<const std::string> labels);

}  // namespace bicl
