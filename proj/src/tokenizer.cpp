#include "d2l/tokenizer.hpp"

#include "d2l/tensor.hpp"

namespace d2l {

Tokenizer::Tokenizer() {
    symbols_ = std::string(3, '\0');
    symbols_ += "\n ";
    symbols_ += "0123456789";
    symbols_ += "abcdefghijklmnopqrstuvwxyz";
    symbols_ += "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    symbols_ += ".,?!'\":;-()";
    for (int& v : lookup_) v = -1;
    for (std::size_t i = 3; i < symbols_.size(); ++i) lookup_[static_cast<unsigned char>(symbols_[i])] = static_cast<int>(i);
}

const Tokenizer& Tokenizer::instance() {
    static const Tokenizer tok;
    return tok;
}

int Tokenizer::id_of(char c) const {
    const int id = lookup_[static_cast<unsigned char>(c)];
    if (id < 0) throw Error(std::string("character outside vocabulary: '") + c + "'");
    return id;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(id_of(c));
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 3 && id < vocab_size()) out.push_back(symbols_[static_cast<std::size_t>(id)]);
    }
    return out;
}

bool Tokenizer::is_digit_token(int id) const {
    return id >= 3 && id < vocab_size() && symbols_[static_cast<std::size_t>(id)] >= '0' &&
           symbols_[static_cast<std::size_t>(id)] <= '9';
}

}  // namespace d2l
