#include <stdlib.h>
int main() {
   int *p = malloc(sizeof(int));
   *p = 1;
   while (*p > 0) {
      *p = *p + 1;
   }
   return 0;
}
