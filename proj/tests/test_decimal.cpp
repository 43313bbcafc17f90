#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gmei/decimal.hpp"

using gmei::Decimal;

TEST_CASE("parse accepts plain decimal forms") {
    CHECK(Decimal::parse("105")->to_string() == "105");
    CHECK(Decimal::parse("0.0555")->to_string() == "0.0555");
    CHECK(Decimal::parse("-3.20")->to_string() == "-3.2");
    CHECK(Decimal::parse("+7")->to_string() == "7");
    CHECK(Decimal::parse("000.500")->to_string() == "0.5");
}

TEST_CASE("parse rejects non-decimal text") {
    CHECK_FALSE(Decimal::parse(""));
    CHECK_FALSE(Decimal::parse("POSITIVE"));
    CHECK_FALSE(Decimal::parse("1.2e3"));
    CHECK_FALSE(Decimal::parse("1.2.3"));
    CHECK_FALSE(Decimal::parse("-"));
    CHECK_FALSE(Decimal::parse("12 "));
}

TEST_CASE("unit conversion stays exact in decimal") {
    // 105 mg/dL * 0.0555 = 5.8275 mmol/L, computed by hand.
    auto value = Decimal::parse("105");
    auto factor = Decimal::parse("0.0555");
    auto scaled = value->multiply(*factor);
    REQUIRE(scaled);
    CHECK(scaled->to_string() == "5.8275");
}

TEST_CASE("comparison is value-based across scales") {
    CHECK(*Decimal::parse("70") <= *Decimal::parse("110"));
    CHECK(*Decimal::parse("1.5") < *Decimal::parse("2"));
    CHECK(*Decimal::parse("2.50") == *Decimal::parse("2.5"));
    CHECK_FALSE(*Decimal::parse("110") <= *Decimal::parse("70"));
    CHECK(*Decimal::parse("-2") < *Decimal::parse("-1.5"));
}

TEST_CASE("multiplication matches a long-double oracle on random inputs") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 2000; ++i) {
        const std::int64_t a = static_cast<std::int64_t>(rng() % 100000);
        const std::int64_t b = static_cast<std::int64_t>(rng() % 10000);
        const int sa = static_cast<int>(rng() % 4);
        const int sb = static_cast<int>(rng() % 4);
        Decimal da(a, sa), db(b, sb);
        auto product = da.multiply(db);
        REQUIRE(product);
        const long double oracle = static_cast<long double>(da.to_double()) * db.to_double();
        CHECK(product->to_double() == doctest::Approx(static_cast<double>(oracle)).epsilon(1e-12));
    }
}

TEST_CASE("multiply reports overflow instead of wrapping") {
    Decimal huge(9'000'000'000'000'000'000LL, 0);
    CHECK_FALSE(huge.multiply(Decimal(1000, 0)));
}
