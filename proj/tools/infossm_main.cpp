#include "infossm/core.hpp"

#include <cstdio>

int main() {
  std::puts("infossm: cli not wired yet");
  return 0;
}
