#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "conflictheads/error.hpp"
#include "conflictheads/textio.hpp"

using namespace conflictheads;

TEST_CASE("format_double round-trips exactly") {
    const std::vector<double> values = {0.0,
                                        -0.0,
                                        1.0,
                                        -1.0,
                                        0.1,
                                        1.0 / 3.0,
                                        2.5e-308,
                                        1.7e308,
                                        3.141592653589793,
                                        -2.2250738585072014e-308,
                                        123456789.123456789};
    for (double v : values) {
        const std::string text = format_double(v);
        const double back = parse_double(text);
        CHECK(std::signbit(back) == std::signbit(v));
        CHECK(back == v);
    }
}

TEST_CASE("parse_double and parse_int reject junk") {
    CHECK(parse_int("-42") == -42);
    CHECK(parse_double("2.5") == 2.5);
    CHECK_THROWS_AS(parse_double(""), InputError);
    CHECK_THROWS_AS(parse_double("1.5x"), InputError);
    CHECK_THROWS_AS(parse_double("nanx"), InputError);
    CHECK_THROWS_AS(parse_int("12.5"), InputError);
    CHECK_THROWS_AS(parse_int("ten"), InputError);
}

TEST_CASE("split and trim behave like line utilities") {
    const auto parts = split_string("a, b,,c", ',');
    REQUIRE(parts.size() == 4);
    CHECK(parts[0] == "a");
    CHECK(parts[1] == " b");
    CHECK(parts[2] == "");
    CHECK(parts[3] == "c");
    CHECK(trim("  x y \t") == "x y");
    CHECK(trim("") == "");
    CHECK(trim(" \n ") == "");
}

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
    CHECK(hash_hex("") == "cbf29ce484222325");
    CHECK(hash_hex("a").size() == 16);
}

TEST_CASE("file io round-trips and creates parents") {
    const std::filesystem::path dir =
        std::filesystem::temp_directory_path() / "conflictheads_textio_test";
    std::filesystem::remove_all(dir);
    const std::string path = (dir / "deep" / "nested" / "file.txt").string();
    write_text_file(path, "hello\nworld\n");
    CHECK(read_text_file(path) == "hello\nworld\n");
    CHECK_THROWS_AS(read_text_file((dir / "missing.txt").string()), IoError);
    std::filesystem::remove_all(dir);
}
