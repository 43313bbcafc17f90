#include "gmei/decimal.hpp"

#include <cctype>
#include <cstdlib>
#include <limits>

namespace gmei {

Decimal::Decimal(std::int64_t mantissa, int scale) : mantissa_(mantissa), scale_(scale) {
    normalize();
}

void Decimal::normalize() {
    if (mantissa_ == 0) {
        scale_ = 0;
        return;
    }
    while (scale_ > 0 && mantissa_ % 10 == 0) {
        mantissa_ /= 10;
        --scale_;
    }
}

std::optional<Decimal> Decimal::parse(std::string_view text) {
    if (text.empty()) return std::nullopt;
    std::size_t i = 0;
    bool negative = false;
    if (text[i] == '+' || text[i] == '-') {
        negative = text[i] == '-';
        ++i;
    }
    if (i >= text.size()) return std::nullopt;

    std::int64_t mantissa = 0;
    int scale = 0;
    bool seen_digit = false;
    bool seen_point = false;
    constexpr std::int64_t kMax = std::numeric_limits<std::int64_t>::max();
    for (; i < text.size(); ++i) {
        char c = text[i];
        if (c == '.') {
            if (seen_point) return std::nullopt;
            seen_point = true;
            continue;
        }
        if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
        if (mantissa > (kMax - (c - '0')) / 10) return std::nullopt;  // overflow
        mantissa = mantissa * 10 + (c - '0');
        if (seen_point) ++scale;
        seen_digit = true;
    }
    if (!seen_digit) return std::nullopt;
    if (negative) mantissa = -mantissa;
    return Decimal(mantissa, scale);
}

std::string Decimal::to_string() const {
    std::int64_t m = mantissa_;
    bool negative = m < 0;
    // Build digits from the absolute value; handle INT64_MIN via unsigned.
    std::uint64_t abs = negative ? 0 - static_cast<std::uint64_t>(m) : static_cast<std::uint64_t>(m);
    std::string digits = std::to_string(abs);
    std::string out;
    if (scale_ == 0) {
        out = digits;
    } else if (static_cast<int>(digits.size()) <= scale_) {
        out = "0." + std::string(scale_ - digits.size(), '0') + digits;
    } else {
        out = digits.substr(0, digits.size() - scale_) + "." + digits.substr(digits.size() - scale_);
    }
    return negative ? "-" + out : out;
}

double Decimal::to_double() const {
    // Round-trips through the canonical text so the double matches what a
    // JSON parser would produce for the same literal.
    return std::strtod(to_string().c_str(), nullptr);
}

std::optional<Decimal> Decimal::multiply(const Decimal& other) const {
    __int128 product = static_cast<__int128>(mantissa_) * other.mantissa_;
    int scale = scale_ + other.scale_;
    // Trailing zeros first: gives the product the best chance to fit.
    while (scale > 0 && product % 10 == 0) {
        product /= 10;
        --scale;
    }
    constexpr __int128 kMax = std::numeric_limits<std::int64_t>::max();
    if (product > kMax || product < -kMax) return std::nullopt;
    return Decimal(static_cast<std::int64_t>(product), scale);
}

bool Decimal::operator==(const Decimal& other) const {
    return mantissa_ == other.mantissa_ && scale_ == other.scale_;
}

bool Decimal::operator<(const Decimal& other) const {
    // Compare a*10^-sa < b*10^-sb by cross-scaling in 128-bit.
    int max_scale = scale_ > other.scale_ ? scale_ : other.scale_;
    __int128 lhs = mantissa_;
    __int128 rhs = other.mantissa_;
    for (int i = scale_; i < max_scale; ++i) lhs *= 10;
    for (int i = other.scale_; i < max_scale; ++i) rhs *= 10;
    return lhs < rhs;
}

bool Decimal::operator<=(const Decimal& other) const {
    return *this == other || *this < other;
}

}  // namespace gmei
