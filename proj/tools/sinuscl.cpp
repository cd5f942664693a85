#include <cstdio>

int main() {
  std::puts("sinuscl: subcommands not wired yet");
  return 1;
}
