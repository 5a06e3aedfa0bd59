#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bicl {

using TokenId = std::int32_t;

// Word-level tokenizer: text is split on spaces, and every newline is a token
// of its own. The table is stored verbatim in the checkpoint.
class Tokenizer {
public:
    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> table);

    static constexpr std::string_view kNewline = "\n";

    std::size_t size() const noexcept { return table_.size(); }
    const std::vector<std::string>& table() const noexcept { return table_; }

    bool contains(std::string_view token) const;
    TokenId id(std::string_view token) const;  // throws std::out_of_range
    const std::string& token(TokenId id) const;

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    friend bool operator==(const Tokenizer& a, const Tokenizer& b) { return a.table_ == b.table_; }

private:
    std::vector<std::string> table_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace bicl
