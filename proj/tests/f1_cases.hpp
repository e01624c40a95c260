#pragma once

// Token-overlap F1 pairs with hand-computed answers. With o overlapping words,
// p prediction words and g gold words, F1 = 2·o / (p + g).

#include <string_view>

namespace kwash::testing {

struct F1Case {
  std::string_view prediction;
  std::string_view gold;
  double expected;
};

inline constexpr F1Case kF1Cases[] = {
    {"paris", "paris", 1.0},
    {"Paris", "paris", 1.0},
    {"paris.", "Paris!", 1.0},
    {"london", "paris", 0.0},
    {"", "paris", 0.0},
    {"paris", "", 0.0},
    {"the openai lab", "openai", 0.5},
    {"openai", "the openai lab", 0.5},
    {"new york city", "new york", 0.8},           // o=2, p=3, g=2
    {"a b c d", "a b", 2.0 * 2 / 6},              // o=2, p=4, g=2
    {"a a b", "a b b", 2.0 * 2 / 6},              // multiset overlap a, b
    {"a a a", "a", 0.5},                          // o=1, p=3, g=1
    {"ent_0042", "ent_0042", 1.0},
    {"ent_0042", "ent 0042", 0.0},
    {"ent-0042", "ent 0042", 1.0},
    {"x y z", "z y x", 1.0},
    {"one two three four five", "five", 2.0 / 6}, // o=1, p=5, g=1
    {"one, two", "two; three", 0.5},              // o=1, p=2, g=2
    {"  spaced   out  ", "spaced out", 1.0},
    {"a b c", "c d e f g", 0.25},                 // o=1, p=3, g=5
};

}  // namespace kwash::testing
