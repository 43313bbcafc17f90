#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace gmei {

// Exact decimal number: mantissa * 10^-scale. Instrument values and unit
// conversion factors are short decimal strings; doing the arithmetic in
// decimal keeps "105 * 0.0555 = 5.8275" exact instead of picking up binary
// float noise on the wire.
class Decimal {
public:
    Decimal() = default;
    Decimal(std::int64_t mantissa, int scale);

    // Accepts [+-]digits[.digits]. Anything else (including exponents) is
    // not a decimal for our purposes and returns nullopt.
    static std::optional<Decimal> parse(std::string_view text);

    // Canonical rendering: no exponent, no trailing fractional zeros,
    // no leading '+'.
    std::string to_string() const;
    double to_double() const;

    // Exact product; nullopt when the result mantissa would overflow.
    std::optional<Decimal> multiply(const Decimal& other) const;

    std::int64_t mantissa() const { return mantissa_; }
    int scale() const { return scale_; }

    bool operator==(const Decimal& other) const;
    bool operator<(const Decimal& other) const;
    bool operator<=(const Decimal& other) const;

private:
    void normalize();

    std::int64_t mantissa_ = 0;
    int scale_ = 0;  // digits after the decimal point, >= 0
};

}  // namespace gmei
