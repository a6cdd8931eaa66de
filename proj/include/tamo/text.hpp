#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tamo {

// Lowercase, strip punctuation except internal hyphens, collapse whitespace.
std::string normalize_text(const std::string& text);

std::vector<std::string> tokenize(const std::string& normalized);

std::string join(const std::vector<std::string>& parts, const std::string& sep);

// FNV-1a 64-bit, used for id hashing and bag-of-words bucketing.
uint64_t fnv1a64(const std::string& s);

// Jaccard overlap between token sets of two normalized strings.
double token_overlap(const std::string& norm_a, const std::string& norm_b);

// Ordered list of atomic action instructions (a_1 ... a_x).
struct InstructionSet {
    std::vector<std::string> instructions;

    bool operator==(const InstructionSet& o) const = default;

    // Normalizes every instruction; throws ContractError if any ends up empty.
    static InstructionSet of(std::vector<std::string> raw);

    std::string key() const { return join(instructions, "; "); }
};

}  // namespace tamo
