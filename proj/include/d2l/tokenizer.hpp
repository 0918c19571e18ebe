#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace d2l {

// Fixed character-level vocabulary shared by every model in the project.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    static const Tokenizer& instance();

    int vocab_size() const { return static_cast<int>(symbols_.size()); }
    // Throws d2l::Error on characters outside the vocabulary.
    std::vector<int> encode(std::string_view text) const;
    // Special tokens decode to nothing.
    std::string decode(const std::vector<int>& ids) const;
    bool is_digit_token(int id) const;
    int id_of(char c) const;

private:
    Tokenizer();
    std::string symbols_;  // index = token id; specials occupy 0..2 as '\0'
    int lookup_[256];
};

}  // namespace d2l
