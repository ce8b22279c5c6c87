#include <cstdio>

int main() {
  // CLI wiring lands once the pipeline modules are in place.
  std::puts("dial: no command given");
  return 1;
}
